//! Parameterized signed-distance deformation: aligned endpoint deformations,
//! learned weights and refinement, and the training loop around them.

pub mod advect;
pub mod align;
pub mod data;
pub mod error;
pub mod grid;
pub mod io;
pub mod loss;
pub mod neural;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Coord, ScalarField, Shape, VectorField};
