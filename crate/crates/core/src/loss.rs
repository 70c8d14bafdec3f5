//! Surface loss and its gradients with respect to the deformation weights
//! and the refinement field.
//!
//! The loss compares tanh-transformed SDFs, `T(s) = tanh(s / sigma)`, so the
//! per-cell derivative `dL/dpsi_j` is `(T(psi_j) - T(phi_j)) T'(psi_j) dx`,
//! with `dx` the cell volume.

use serde::{Deserialize, Serialize};

use crate::advect::{advect_backward, advect_backward_vec, advect_forward, departure};
use crate::align::{assemble_final_parts, region_factor, AlignedSequence, FinalDeformation, WeightVector};
use crate::error::{Error, Result};
use crate::grid::{
    gradient_fd, region_sum, same_shape, upsample_constant, Coord, ScalarField, VectorField, MAX_DIMS,
};

/// How the spatial SDF gradient at a displaced position is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Exact position derivative of the multilinear sampler used by
    /// advection, so gradients match finite differences of the loss.
    #[default]
    Interpolant,
    /// Central-difference gradient on the grid, then sampled multilinearly.
    Stencil,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// tanh width in world units; `None` uses five cells of the compared grid.
    pub sigma: Option<f64>,
    pub mode: GradientMode,
}

impl LossOptions {
    fn sigma_for(&self, f: &ScalarField) -> f64 {
        self.sigma.unwrap_or_else(|| f.default_sigma())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l: f64,
    pub reg_theta: f64,
    pub reg_w: f64,
    pub l_t: f64,
}

/// Data term plus the two regularizers.
pub fn total_loss(l: f64, theta_norm: f64, w_norm: f64, gamma1: f64, gamma2: f64) -> LossReport {
    let reg_theta = gamma1 * theta_norm;
    let reg_w = gamma2 * w_norm;
    LossReport {
        l,
        reg_theta,
        reg_w,
        l_t: l + reg_theta + reg_w,
    }
}

fn check_pair(psi: &ScalarField, phi: &ScalarField) -> Result<()> {
    same_shape(&psi.shape(), &phi.shape())?;
    if psi.spacing() != phi.spacing() {
        return Err(Error::InvalidArgument(format!(
            "spacing mismatch: {} vs {}",
            psi.spacing(),
            phi.spacing()
        )));
    }
    Ok(())
}

/// `L = 1/2 sum (T(psi) - T(phi))^2 dx` with the default tanh width.
pub fn surface_loss(psi: &ScalarField, phi: &ScalarField) -> Result<f64> {
    surface_loss_with(psi, phi, psi.default_sigma())
}

pub fn surface_loss_with(psi: &ScalarField, phi: &ScalarField, sigma: f64) -> Result<f64> {
    check_pair(psi, phi)?;
    check_sigma(sigma)?;
    let dx = psi.cell_volume();
    let sum: f64 = psi
        .values()
        .iter()
        .zip(phi.values())
        .map(|(a, b)| {
            let d = (a / sigma).tanh() - (b / sigma).tanh();
            d * d
        })
        .sum();
    Ok(0.5 * sum * dx)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))
    }
}

/// Loss value and `dL/dpsi_j` for every cell.
pub fn residual_field(psi: &ScalarField, phi: &ScalarField, sigma: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(psi, phi)?;
    check_sigma(sigma)?;
    let dx = psi.cell_volume();
    let mut loss = 0.0;
    let r = psi
        .values()
        .iter()
        .zip(phi.values())
        .map(|(a, b)| {
            let ta = (a / sigma).tanh();
            let d = ta - (b / sigma).tanh();
            loss += d * d;
            d * (1.0 - ta * ta) / sigma * dx
        })
        .collect();
    Ok((0.5 * loss * dx, r))
}

/// Spatial gradients of `f` at the departure points `x - d(x)` of every cell.
fn gradients_at_departures(f: &ScalarField, d: &VectorField, mode: GradientMode) -> Result<Vec<Coord>> {
    let h = f.spacing();
    let shape = f.shape();
    Ok(match mode {
        GradientMode::Interpolant => shape
            .cells()
            .map(|idx| f.sample_gradient_grid(&departure(&idx, h, d)))
            .collect(),
        GradientMode::Stencil => {
            let g = gradient_fd(f)?;
            shape.cells().map(|idx| g.sample_grid(&departure(&idx, h, d))).collect()
        }
    })
}

#[derive(Clone, Debug)]
pub struct BetaGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub psi: ScalarField,
    pub parts: FinalDeformation,
}

/// `dL/dbeta` with the per-weight sensitivity of the merged deformation
/// approximated by forward-advecting each aligned field along `v_inv`.
pub fn grad_beta(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    phi: &ScalarField,
    fill_iters: usize,
) -> Result<Vec<f64>> {
    Ok(grad_beta_with(psi0, seq, beta, phi, fill_iters, &LossOptions::default())?.grad)
}

pub fn grad_beta_with(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    phi: &ScalarField,
    fill_iters: usize,
    opts: &LossOptions,
) -> Result<BetaGradient> {
    beta_gradient(psi0, seq, beta, phi, fill_iters, opts, false)
}

/// Deliberately simplified variant that treats the correction as one more
/// backward advection, `v_final(x) = v_sum(x - v_inv(x))`, and differentiates
/// that. The returned `psi` and `loss` are the ones of this simplified model.
pub fn grad_beta_naive(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    phi: &ScalarField,
    fill_iters: usize,
) -> Result<Vec<f64>> {
    Ok(grad_beta_naive_with(psi0, seq, beta, phi, fill_iters, &LossOptions::default())?.grad)
}

pub fn grad_beta_naive_with(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    phi: &ScalarField,
    fill_iters: usize,
    opts: &LossOptions,
) -> Result<BetaGradient> {
    beta_gradient(psi0, seq, beta, phi, fill_iters, opts, true)
}

fn beta_gradient(
    psi0: &ScalarField,
    seq: &AlignedSequence,
    beta: &WeightVector,
    phi: &ScalarField,
    fill_iters: usize,
    opts: &LossOptions,
    naive: bool,
) -> Result<BetaGradient> {
    check_pair(psi0, phi)?;
    let mut parts = assemble_final_parts(seq, beta, fill_iters)?;
    if naive {
        parts.v_final = advect_backward_vec(&parts.v_sum, &parts.v_inv)?;
    }
    let psi = advect_backward(psi0, &parts.v_final)?;
    let (loss, r) = residual_field(&psi, phi, opts.sigma_for(psi0))?;
    let grads = gradients_at_departures(psi0, &parts.v_final, opts.mode)?;
    let d = psi0.dims();
    let h = psi0.spacing();
    let mut out = Vec::with_capacity(seq.len());
    for u in seq.fields() {
        let g = if naive {
            advect_backward_vec(u, &parts.v_inv)?
        } else {
            advect_forward(u, &parts.v_inv, fill_iters)?
        };
        let same = g.spacing() == h && g.res() == psi0.res();
        let mut acc = 0.0;
        for (j, idx) in psi0.shape().cells().enumerate() {
            if r[j] == 0.0 {
                continue;
            }
            let gi: Coord = if same {
                let mut c = [0.0; MAX_DIMS];
                c[..d].copy_from_slice(g.at(j));
                c
            } else {
                g.sample_grid(&crate::grid::map_cell(&idx, h, g.spacing(), d))
            };
            let dot: f64 = (0..d).map(|a| gi[a] * grads[j][a]).sum();
            acc -= dot * r[j];
        }
        out.push(acc);
    }
    Ok(BetaGradient {
        loss,
        grad: out,
        psi,
        parts,
    })
}

#[derive(Clone, Debug)]
pub struct DefoGradient {
    pub loss: f64,
    /// `dL/dw_j` per coarse cell.
    pub grad: VectorField,
    pub psi: ScalarField,
}

/// `dL/dw_j` for the piecewise-constant refinement field `w`.
pub fn grad_defo(psi_tilde: &ScalarField, phi: &ScalarField, w: &VectorField, factor: usize) -> Result<VectorField> {
    Ok(grad_defo_with(psi_tilde, phi, w, factor, &LossOptions::default())?.grad)
}

pub fn grad_defo_with(
    psi_tilde: &ScalarField,
    phi: &ScalarField,
    w: &VectorField,
    factor: usize,
    opts: &LossOptions,
) -> Result<DefoGradient> {
    check_pair(psi_tilde, phi)?;
    let expected = region_factor(psi_tilde.res(), w.res())?;
    if expected != factor {
        return Err(Error::InvalidArgument(format!(
            "region factor {factor} does not match resolutions {:?} and {:?}",
            psi_tilde.res(),
            w.res()
        )));
    }
    let up = upsample_constant(w, factor)?;
    let psi = advect_backward(psi_tilde, &up)?;
    let (loss, r) = residual_field(&psi, phi, opts.sigma_for(psi_tilde))?;
    let grads = gradients_at_departures(psi_tilde, &up, opts.mode)?;
    let d = psi_tilde.dims();
    let mut fine = vec![0.0; r.len() * d];
    for (j, rj) in r.iter().enumerate() {
        for a in 0..d {
            fine[j * d + a] = -grads[j][a] * rj;
        }
    }
    let fine = VectorField::new(psi_tilde.shape(), psi_tilde.spacing(), fine)?;
    let grad = region_sum(&fine, factor)?;
    Ok(DefoGradient { loss, grad, psi })
}
