//! Single-point evaluation of a bundle with per-stage timings.

use std::time::Instant;

use deformnet_core::advect::advect_backward;
use deformnet_core::align::assemble_final;
use deformnet_core::grid::upsample_constant;
use deformnet_core::{Error, Result, ScalarField};
use serde::Serialize;

use crate::bundle::ModelBundle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    /// Both network forward passes.
    pub net_eval_ms: f64,
    /// Weighted sum, inverse correction and refinement upsampling.
    pub defo_assemble_ms: f64,
    /// Advection of the initial SDF through both deformations.
    pub advect_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// The parameter point actually evaluated, after clamping.
    pub alpha: Vec<f64>,
    pub clamped: bool,
    pub beta: Vec<f64>,
    pub psi: ScalarField,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Components outside `[0, 1]` are clamped and flagged; wrong length or
/// non-finite entries are rejected.
pub fn clamp_alpha(bundle: &ModelBundle, alpha: &[f64]) -> Result<(Vec<f64>, bool)> {
    if alpha.len() != bundle.n_params() {
        return Err(Error::LengthMismatch {
            expected: bundle.n_params(),
            got: alpha.len(),
        });
    }
    if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha component {a} is not finite")));
    }
    let clamped: Vec<f64> = alpha.iter().map(|a| a.clamp(0.0, 1.0)).collect();
    let changed = clamped != alpha;
    Ok((clamped, changed))
}

pub fn infer(bundle: &ModelBundle, alpha: &[f64]) -> Result<Inference> {
    let start = Instant::now();
    let (alpha, clamped) = clamp_alpha(bundle, alpha)?;
    let m = &bundle.model;

    let t = Instant::now();
    let beta = m.pnet.forward(&alpha)?.0;
    let w = match &m.dnet {
        Some(d) => Some(d.forward(&alpha)?.0),
        None => None,
    };
    let net_eval_ms = ms(t);

    let t = Instant::now();
    let v_final = assemble_final(&m.seq, &beta, m.fill_iters)?;
    let w_up = match &w {
        Some(w) => Some(upsample_constant(w, bundle.region_factor)?),
        None => None,
    };
    let defo_assemble_ms = ms(t);

    let t = Instant::now();
    let mut psi = advect_backward(&m.psi0, &v_final)?;
    if let Some(w) = &w_up {
        psi = advect_backward(&psi, w)?;
    }
    let advect_ms = ms(t);

    Ok(Inference {
        alpha,
        clamped,
        beta: beta.0,
        psi,
        timings: Timings {
            net_eval_ms,
            defo_assemble_ms,
            advect_ms,
            total_ms: ms(start),
        },
    })
}
