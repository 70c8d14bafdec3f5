//! Two-stage training: the weight network first, then the refinement
//! network on top of the frozen weights. Also houses the ablation and the
//! direct SDF interpolation baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advect::DEFAULT_FILL_ITERS;
use crate::align::{apply_refinement, apply_weighted, AlignedSequence, WeightVector};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};
use crate::loss::{grad_beta_naive_with, grad_beta_with, grad_defo_with, surface_loss_with, GradientMode, LossOptions};
use crate::neural::{AdamState, DefoNet, ParamNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaGradientKind {
    #[default]
    Aligned,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps_param: usize,
    pub steps_defo: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub fill_iters: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub sigma: Option<f64>,
    /// Fine cells per refinement cell along each axis.
    pub region_factor: usize,
    pub log_interval: usize,
    pub batch: usize,
    pub beta_gradient: BetaGradientKind,
    pub gradient_mode: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps_param: 2000,
            steps_defo: 4000,
            gamma1: 0.0,
            gamma2: 0.0,
            fill_iters: DEFAULT_FILL_ITERS,
            seed: 7,
            val_fraction: 0.05,
            test_fraction: 0.05,
            sigma: None,
            region_factor: 4,
            log_interval: 100,
            batch: 1,
            beta_gradient: BetaGradientKind::Aligned,
            gradient_mode: GradientMode::Interpolant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(Error::InvalidArgument("regularization weights must be >= 0".into()));
        }
        if self.fill_iters == 0 || self.region_factor == 0 || self.log_interval == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "fill_iters, region_factor, log_interval and batch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            sigma: self.sigma,
            mode: self.gradient_mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean sampled training loss since the previous point; at step 0 the
    /// mean over the whole training split.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_loss\n");
        for p in &self.points {
            s.push_str(&format!("{},{:e},{:e}\n", p.step, p.train_loss, p.val_loss));
        }
        s
    }

    pub fn initial_val(&self) -> Option<f64> {
        self.points.first().map(|p| p.val_loss)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.points.last().map(|p| p.val_loss)
    }
}

/// Everything needed to evaluate the representation at a parameter point.
#[derive(Clone, Debug)]
pub struct Model {
    pub psi0: ScalarField,
    pub seq: AlignedSequence,
    pub pnet: ParamNet,
    pub dnet: Option<DefoNet>,
    pub fill_iters: usize,
}

impl Model {
    pub fn beta(&self, alpha: &[f64]) -> Result<WeightVector> {
        Ok(self.pnet.forward(alpha)?.0)
    }

    /// `psi_tilde` from the weighted aligned deformations only.
    pub fn weighted(&self, alpha: &[f64]) -> Result<ScalarField> {
        let beta = self.beta(alpha)?;
        Ok(apply_weighted(&self.psi0, &self.seq, &beta, self.fill_iters)?.0)
    }

    pub fn refinement(&self, alpha: &[f64]) -> Result<Option<VectorField>> {
        match &self.dnet {
            Some(d) => Ok(Some(d.forward(alpha)?.0)),
            None => Ok(None),
        }
    }

    pub fn full(&self, alpha: &[f64]) -> Result<ScalarField> {
        let psi_t = self.weighted(alpha)?;
        match self.refinement(alpha)? {
            Some(w) => apply_refinement(&psi_t, &w),
            None => Ok(psi_t),
        }
    }
}

fn nonfinite(stage: &str, step: usize, sample: usize, alpha: &[f64]) -> Error {
    Error::NonFinite(format!(
        "{stage} loss at step {step}, training sample {sample} (alpha {alpha:?})"
    ))
}

fn split_or_empty<'a>(dataset: &'a Dataset, split: Split) -> Result<Vec<&'a Sample>> {
    let s = dataset.of_split(split);
    if s.is_empty() && split == Split::Train {
        return Err(Error::EmptyDataset);
    }
    Ok(s)
}

fn mean(v: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in v {
        sum += x?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

fn sigma_of(cfg: &TrainConfig, f: &ScalarField) -> f64 {
    cfg.sigma.unwrap_or_else(|| f.default_sigma())
}

/// Mean loss of the weighted-only reconstruction over `samples`.
pub fn mean_param_loss(
    samples: &[&Sample],
    psi0: &ScalarField,
    seq: &AlignedSequence,
    net: &ParamNet,
    cfg: &TrainConfig,
) -> Result<f64> {
    let sigma = sigma_of(cfg, psi0);
    mean(samples.iter().map(|s| {
        let beta = net.forward(&s.alpha)?.0;
        let psi = apply_weighted(psi0, seq, &beta, cfg.fill_iters)?.0;
        surface_loss_with(&psi, &s.phi, sigma)
    }))
}

/// Trains the weight network with per-sample ADAM steps.
pub fn train_param(
    dataset: &Dataset,
    psi0: &ScalarField,
    seq: &AlignedSequence,
    mut net: ParamNet,
    cfg: &TrainConfig,
) -> Result<(ParamNet, LossCurve)> {
    cfg.validate()?;
    let train = split_or_empty(dataset, Split::Train)?;
    let val = split_or_empty(dataset, Split::Validation)?;
    let val = if val.is_empty() { train.clone() } else { val };
    let opts = cfg.loss_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.param_count(), cfg.lr);
    let mut curve = LossCurve::default();
    curve.points.push(CurvePoint {
        step: 0,
        train_loss: mean_param_loss(&train, psi0, seq, &net, cfg)?,
        val_loss: mean_param_loss(&val, psi0, seq, &net, cfg)?,
    });
    let mut acc = 0.0;
    let mut count = 0usize;
    for step in 1..=cfg.steps_param {
        let mut grads = vec![0.0; net.param_count()];
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..train.len());
            let s = train[i];
            let (beta, cache) = net.forward(&s.alpha)?;
            let g = match cfg.beta_gradient {
                BetaGradientKind::Aligned => grad_beta_with(psi0, seq, &beta, &s.phi, cfg.fill_iters, &opts)?,
                BetaGradientKind::Naive => grad_beta_naive_with(psi0, seq, &beta, &s.phi, cfg.fill_iters, &opts)?,
            };
            if !g.loss.is_finite() || g.grad.iter().any(|v| !v.is_finite()) {
                return Err(nonfinite("parameter", step, i, &s.alpha));
            }
            acc += g.loss;
            count += 1;
            let d = net.backward(&cache, &g.grad)?;
            for (a, b) in grads.iter_mut().zip(d) {
                *a += b / cfg.batch as f64;
            }
        }
        net.step(&mut adam, &grads, cfg.gamma1)?;
        if step % cfg.log_interval == 0 || step == cfg.steps_param {
            curve.points.push(CurvePoint {
                step,
                train_loss: acc / count as f64,
                val_loss: mean_param_loss(&val, psi0, seq, &net, cfg)?,
            });
            acc = 0.0;
            count = 0;
        }
    }
    Ok((net, curve))
}

struct Prepared<'a> {
    sample: &'a Sample,
    psi_tilde: ScalarField,
}

fn prepare<'a>(
    samples: &[&'a Sample],
    psi0: &ScalarField,
    seq: &AlignedSequence,
    pnet: Option<&ParamNet>,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared<'a>>> {
    samples
        .iter()
        .map(|s| {
            let psi_tilde = match pnet {
                Some(net) => {
                    let beta = net.forward(&s.alpha)?.0;
                    apply_weighted(psi0, seq, &beta, cfg.fill_iters)?.0
                }
                None => psi0.clone(),
            };
            Ok(Prepared { sample: s, psi_tilde })
        })
        .collect()
}

fn mean_defo_loss(prepared: &[Prepared], dnet: &DefoNet, cfg: &TrainConfig) -> Result<f64> {
    mean(prepared.iter().map(|p| {
        let w = dnet.forward(&p.sample.alpha)?.0;
        let psi = apply_refinement(&p.psi_tilde, &w)?;
        surface_loss_with(&psi, &p.sample.phi, sigma_of(cfg, &p.psi_tilde))
    }))
}

/// Trains the refinement network on top of the frozen weight network. With
/// `pnet = None` the refinement acts directly on `psi0`.
pub fn train_defo(
    dataset: &Dataset,
    psi0: &ScalarField,
    seq: &AlignedSequence,
    pnet: Option<&ParamNet>,
    mut dnet: DefoNet,
    cfg: &TrainConfig,
) -> Result<(DefoNet, LossCurve)> {
    cfg.validate()?;
    let train = split_or_empty(dataset, Split::Train)?;
    let val = split_or_empty(dataset, Split::Validation)?;
    let val = if val.is_empty() { train.clone() } else { val };
    let factor = crate::align::region_factor(psi0.res(), dnet.output_shape().res())?;
    if factor != cfg.region_factor {
        return Err(Error::InvalidArgument(format!(
            "network output {:?} and SDF {:?} give region factor {factor}, config says {}",
            dnet.output_shape().res(),
            psi0.res(),
            cfg.region_factor
        )));
    }
    let train_p = prepare(&train, psi0, seq, pnet, cfg)?;
    let val_p = prepare(&val, psi0, seq, pnet, cfg)?;
    let opts = cfg.loss_options();
    // a separate stream so the two stages do not share sample order
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_def0);
    let mut adam = AdamState::new(dnet.param_count(), cfg.lr);
    let mut curve = LossCurve::default();
    curve.points.push(CurvePoint {
        step: 0,
        train_loss: mean_defo_loss(&train_p, &dnet, cfg)?,
        val_loss: mean_defo_loss(&val_p, &dnet, cfg)?,
    });
    let mut acc = 0.0;
    let mut count = 0usize;
    for step in 1..=cfg.steps_defo {
        let mut grads = vec![0.0; dnet.param_count()];
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..train_p.len());
            let p = &train_p[i];
            let (w, cache) = dnet.forward(&p.sample.alpha)?;
            let mut g = grad_defo_with(&p.psi_tilde, &p.sample.phi, &w, factor, &opts)?;
            if !g.loss.is_finite() || g.grad.values().iter().any(|v| !v.is_finite()) {
                return Err(nonfinite("deformation", step, i, &p.sample.alpha));
            }
            if cfg.gamma2 > 0.0 {
                g.grad.add_scaled(&w, 2.0 * cfg.gamma2)?;
            }
            acc += g.loss;
            count += 1;
            let d = dnet.backward(&cache, &g.grad)?;
            for (a, b) in grads.iter_mut().zip(d) {
                *a += b / cfg.batch as f64;
            }
        }
        dnet.step(&mut adam, &grads, cfg.gamma1)?;
        if step % cfg.log_interval == 0 || step == cfg.steps_defo {
            curve.points.push(CurvePoint {
                step,
                train_loss: acc / count as f64,
                val_loss: mean_defo_loss(&val_p, &dnet, cfg)?,
            });
            acc = 0.0;
            count = 0;
        }
    }
    Ok((dnet, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_samples: usize,
    /// Undeformed `psi0` against every sample.
    pub l_base: f64,
    /// Weighted deformations only.
    pub l_param: f64,
    /// Refinement applied to the undeformed `psi0`, when such a network was
    /// trained.
    pub l_defo_flat: Option<f64>,
    /// Weighted deformations plus refinement.
    pub l_full: f64,
    pub l_full_std: f64,
    pub ratio_param: f64,
    pub ratio_full: f64,
    pub ratio_defo_flat: Option<f64>,
    /// Direct multilinear blending of the corner SDFs, when corners are known.
    pub l_direct_interp: Option<f64>,
}

/// Mean test losses under each configuration.
pub fn evaluate_ablation(
    samples: &[&Sample],
    model: &Model,
    flat_dnet: Option<&DefoNet>,
    corners: Option<&[&ScalarField]>,
    sigma: Option<f64>,
) -> Result<AblationReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sigma = sigma.unwrap_or_else(|| model.psi0.default_sigma());
    let mut base = Vec::with_capacity(samples.len());
    let mut param = Vec::with_capacity(samples.len());
    let mut full = Vec::with_capacity(samples.len());
    let mut flat = Vec::new();
    let mut direct = Vec::new();
    for s in samples {
        base.push(surface_loss_with(&model.psi0, &s.phi, sigma)?);
        let psi_t = model.weighted(&s.alpha)?;
        param.push(surface_loss_with(&psi_t, &s.phi, sigma)?);
        let psi = match model.refinement(&s.alpha)? {
            Some(w) => apply_refinement(&psi_t, &w)?,
            None => psi_t,
        };
        full.push(surface_loss_with(&psi, &s.phi, sigma)?);
        if let Some(d) = flat_dnet {
            let w = d.forward(&s.alpha)?.0;
            flat.push(surface_loss_with(&apply_refinement(&model.psi0, &w)?, &s.phi, sigma)?);
        }
        if let Some(c) = corners {
            direct.push(surface_loss_with(&baseline_direct_interp(c, &s.alpha)?, &s.phi, sigma)?);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let l_base = avg(&base);
    let l_param = avg(&param);
    let l_full = avg(&full);
    let var = full.iter().map(|x| (x - l_full).powi(2)).sum::<f64>() / full.len() as f64;
    let l_defo_flat = (!flat.is_empty()).then(|| avg(&flat));
    let ratio = |l: f64| if l_base > 0.0 { l / l_base } else { 1.0 };
    Ok(AblationReport {
        n_samples: samples.len(),
        l_base,
        l_param,
        l_defo_flat,
        l_full,
        l_full_std: var.sqrt(),
        ratio_param: ratio(l_param),
        ratio_full: ratio(l_full),
        ratio_defo_flat: l_defo_flat.map(ratio),
        l_direct_interp: (!direct.is_empty()).then(|| avg(&direct)),
    })
}

/// Multilinear blend of the `2^N` corner SDFs at `alpha`. Corner `k` sits
/// at the parameter point whose bit `i` is `alpha_i = 1`.
pub fn baseline_direct_interp(corners: &[&ScalarField], alpha: &[f64]) -> Result<ScalarField> {
    let n = alpha.len();
    if n >= usize::BITS as usize || corners.len() != 1usize << n {
        return Err(Error::LengthMismatch {
            expected: 1usize << n.min(16),
            got: corners.len(),
        });
    }
    let first = corners[0];
    for c in corners {
        c.same_layout(first)?;
    }
    let mut data = vec![0.0; first.values().len()];
    for (mask, c) in corners.iter().enumerate() {
        let w: f64 = (0..n)
            .map(|i| if mask >> i & 1 == 1 { alpha[i] } else { 1.0 - alpha[i] })
            .product();
        if w == 0.0 {
            continue;
        }
        for (d, v) in data.iter_mut().zip(c.values()) {
            *d += w * v;
        }
    }
    ScalarField::new(first.shape(), first.spacing(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub aligned_final_val: f64,
    pub naive_final_val: f64,
    pub ratio: f64,
    pub aligned: LossCurve,
    pub naive: LossCurve,
}

/// Trains the weight network twice from the same initialization, once with
/// the aligned gradient and once with the naive one.
pub fn divergence_experiment(
    dataset: &Dataset,
    psi0: &ScalarField,
    seq: &AlignedSequence,
    init: &ParamNet,
    cfg: &TrainConfig,
) -> Result<DivergenceReport> {
    let mut a_cfg = cfg.clone();
    a_cfg.beta_gradient = BetaGradientKind::Aligned;
    let mut n_cfg = cfg.clone();
    n_cfg.beta_gradient = BetaGradientKind::Naive;
    let (_, aligned) = train_param(dataset, psi0, seq, init.clone(), &a_cfg)?;
    let (_, naive) = train_param(dataset, psi0, seq, init.clone(), &n_cfg)?;
    let a = aligned.final_val().unwrap_or(f64::NAN);
    let b = naive.final_val().unwrap_or(f64::NAN);
    Ok(DivergenceReport {
        aligned_final_val: a,
        naive_final_val: b,
        ratio: b / a,
        aligned,
        naive,
    })
}
