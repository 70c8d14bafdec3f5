//! Deformation alignment and application.
//!
//! Endpoint deformations `u_1..u_N` are aligned once into `u*_i` so that each
//! acts at the configuration produced by all later ones. For a weight vector
//! `beta` the aligned fields are summed, shifted back by the inversely weighted
//! offset with one forward-advection step and applied to the initial SDF in a
//! single backward advection.

use crate::advect::{advect_backward, advect_backward_vec, advect_forward};
use crate::error::{Error, Result};
use crate::grid::{same_shape, upsample_constant, ScalarField, Shape, VectorField};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSequence {
    fields: Vec<VectorField>,
    axis_of: Vec<usize>,
}

impl AlignedSequence {
    /// Wraps already aligned fields. `axis_of[i]` names the parameter axis
    /// deformation `i` spans.
    pub fn new(fields: Vec<VectorField>, axis_of: Vec<usize>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InvalidArgument("at least one deformation is required".into()));
        }
        if axis_of.len() != fields.len() {
            return Err(Error::LengthMismatch {
                expected: fields.len(),
                got: axis_of.len(),
            });
        }
        for f in &fields[1..] {
            same_shape(&fields[0].shape(), &f.shape())?;
        }
        Ok(AlignedSequence { fields, axis_of })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn axis_of(&self) -> &[usize] {
        &self.axis_of
    }

    pub fn shape(&self) -> Shape {
        self.fields[0].shape()
    }

    pub fn spacing(&self) -> f64 {
        self.fields[0].spacing()
    }

    fn check_beta(&self, beta: &WeightVector) -> Result<()> {
        if beta.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: beta.len(),
            });
        }
        Ok(())
    }
}

/// Deformation weights. Nominally in `[0, 1]`; values outside are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Indices of weights outside the nominal range.
    pub fn out_of_range(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, b)| !(0.0..=1.0).contains(*b))
            .map(|(i, _)| i)
            .collect()
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        WeightVector(v)
    }
}

/// Aligns raw endpoint deformations: `u*_N = u_N` and
/// `u*_i(x) = u_i(x - sum_{j>i} u*_j(x))`.
pub fn align_sequence(raw: &[VectorField]) -> Result<AlignedSequence> {
    let axes = (0..raw.len()).collect();
    align_sequence_with_axes(raw, axes)
}

pub fn align_sequence_with_axes(raw: &[VectorField], axis_of: Vec<usize>) -> Result<AlignedSequence> {
    let Some(last) = raw.last() else {
        return Err(Error::InvalidArgument("at least one deformation is required".into()));
    };
    for f in raw {
        same_shape(&last.shape(), &f.shape())?;
    }
    let n = raw.len();
    let mut aligned = vec![last.clone(); n];
    let mut suffix = last.clone();
    for i in (0..n - 1).rev() {
        aligned[i] = advect_backward_vec(&raw[i], &suffix)?;
        suffix.add_scaled(&aligned[i], 1.0)?;
    }
    AlignedSequence::new(aligned, axis_of)
}

/// `v_sum = sum_i beta_i u*_i`.
pub fn weighted_sum(seq: &AlignedSequence, beta: &WeightVector) -> Result<VectorField> {
    seq.check_beta(beta)?;
    let mut out = VectorField::zeros(seq.shape(), seq.spacing());
    for (u, b) in seq.fields.iter().zip(&beta.0) {
        out.add_scaled(u, *b)?;
    }
    Ok(out)
}

/// `v_inv = -sum_i (1 - beta_i) u*_i`.
pub fn inverse_sum(seq: &AlignedSequence, beta: &WeightVector) -> Result<VectorField> {
    seq.check_beta(beta)?;
    let mut out = VectorField::zeros(seq.shape(), seq.spacing());
    for (u, b) in seq.fields.iter().zip(&beta.0) {
        out.add_scaled(u, -(1.0 - b))?;
    }
    Ok(out)
}

/// The merged deformation. Intermediate fields are kept because the weight
/// gradient reuses them.
#[derive(Clone, Debug)]
pub struct FinalDeformation {
    pub v_sum: VectorField,
    pub v_inv: VectorField,
    pub v_final: VectorField,
}

pub fn assemble_final_parts(
    seq: &AlignedSequence,
    beta: &WeightVector,
    fill_iters: usize,
) -> Result<FinalDeformation> {
    let v_sum = weighted_sum(seq, beta)?;
    let v_inv = inverse_sum(seq, beta)?;
    let v_final = advect_forward(&v_sum, &v_inv, fill_iters)?;
    Ok(FinalDeformation {
        v_sum,
        v_inv,
        v_final,
    })
}

/// `v_final` defined by `v_final(x + v_inv(x)) = v_sum(x)`.
pub fn assemble_final(seq: &AlignedSequence, beta: &WeightVector, fill_iters: usize) -> Result<VectorField> {
    Ok(assemble_final_parts(seq, beta, fill_iters)?.v_final)
}

/// Integer per-axis ratio between a fine SDF grid and a coarse deformation
/// grid; all axes must agree.
pub fn region_factor(fine: &[usize], coarse: &[usize]) -> Result<usize> {
    if fine.len() != coarse.len() {
        return Err(Error::DimsMismatch {
            expected: fine.len(),
            got: coarse.len(),
        });
    }
    let mut factor = None;
    for (f, c) in fine.iter().zip(coarse) {
        if f % c != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {fine:?} is not an integer multiple of {coarse:?}"
            )));
        }
        let r = f / c;
        match factor {
            None => factor = Some(r),
            Some(prev) if prev != r => {
                return Err(Error::InvalidArgument(format!(
                    "non-uniform region factor between {fine:?} and {coarse:?}"
                )))
            }
            _ => {}
        }
    }
    Ok(factor.unwrap_or(1))
}

/// Applies a piecewise-constant refinement field `w` to `psi_tilde`:
/// `psi(x) = psi_tilde(x - w(x))`.
pub fn apply_refinement(psi_tilde: &ScalarField, w: &VectorField) -> Result<ScalarField> {
    let factor = region_factor(psi_tilde.res(), w.res())?;
    let up = upsample_constant(w, factor)?;
    advect_backward(psi_tilde, &up)
}

/// `psi_tilde = psi0(x - v_final(x))` together with the deformation used.
pub fn apply_weighted(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    fill_iters: usize,
) -> Result<(ScalarField, FinalDeformation)> {
    let parts = assemble_final_parts(seq, beta, fill_iters)?;
    let psi_tilde = advect_backward(psi0, &parts.v_final)?;
    Ok((psi_tilde, parts))
}

/// Full deformation of the initial SDF: weighted aligned deformations, then
/// the optional refinement field.
pub fn apply_full(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    w: Option<&VectorField>,
    fill_iters: usize,
) -> Result<ScalarField> {
    let (psi_tilde, _) = apply_weighted(psi0, seq, beta, fill_iters)?;
    match w {
        Some(w) => apply_refinement(&psi_tilde, w),
        None => Ok(psi_tilde),
    }
}

/// Reference baseline without alignment: `psi_i(x) = psi_{i-1}(x - beta_i u_i(x))`.
pub fn apply_sequential(psi0: &ScalarField, raw: &[VectorField], beta: &WeightVector) -> Result<ScalarField> {
    if raw.len() != beta.len() {
        return Err(Error::LengthMismatch {
            expected: raw.len(),
            got: beta.len(),
        });
    }
    let mut psi = psi0.clone();
    for (u, b) in raw.iter().zip(&beta.0) {
        psi = advect_backward(&psi, &u.scaled(*b))?;
    }
    Ok(psi)
}
