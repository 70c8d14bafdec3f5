//! Pipeline stages, model packaging and the HTTP inference service.
pub mod api;
pub mod bundle;
pub mod contour;
pub mod infer;
pub mod pipeline;

pub use bundle::ModelBundle;
