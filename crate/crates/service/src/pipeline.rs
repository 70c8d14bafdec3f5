//! End-to-end stages shared by the CLI and the tests.

use std::path::Path;

use deformnet_core::align::{align_sequence_with_axes, region_factor};
use deformnet_core::data::{
    endpoint_deformations, gen_synthetic, split, Dataset, Family, MorphConfig, Split, SyntheticFamilySpec,
};
use deformnet_core::io::{quantize_vector, read_vector, write_dsdf, Field};
use deformnet_core::neural::{DefoNet, DefoNetConfig, ParamNet, ParamNetConfig};
use deformnet_core::train::{evaluate_ablation, train_defo, train_param, AblationReport, LossCurve, Model, TrainConfig};
use deformnet_core::{Error, Result, VectorField};
use serde::{Deserialize, Serialize};

use crate::bundle::{ModelBundle, Reference};

pub const DEFOS_MANIFEST: &str = "defos.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub family: Family,
    pub res: usize,
    pub grid: Vec<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub strength: Option<f64>,
}

impl DataConfig {
    pub fn new(family: Family, res: usize, grid: &[usize]) -> Self {
        DataConfig {
            family,
            res,
            grid: grid.to_vec(),
            seed: 7,
            val_fraction: 0.05,
            test_fraction: 0.05,
            strength: None,
        }
    }
}

pub fn gen_data(cfg: &DataConfig) -> Result<Dataset> {
    let mut spec = SyntheticFamilySpec::new(cfg.family, cfg.res);
    if let Some(s) = cfg.strength {
        spec.strength = s;
    }
    split(gen_synthetic(&spec, &cfg.grid)?, cfg.seed, cfg.val_fraction, cfg.test_fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefoEntry {
    pub file: String,
    pub axis: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefosManifest {
    pub morph: MorphConfig,
    pub fields: Vec<DefoEntry>,
}

/// Endpoint deformations, one per parameter axis, rounded to the precision
/// they are stored at.
pub fn compute_defos(ds: &Dataset, cfg: &MorphConfig) -> Result<(Vec<VectorField>, DefosManifest)> {
    let results = endpoint_deformations(ds, cfg)?;
    let mut fields = Vec::with_capacity(results.len());
    let mut entries = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        entries.push(DefoEntry {
            file: format!("u_{i}.dsdf"),
            axis: i,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            warning: r.warning,
        });
        fields.push(quantize_vector(&r.field));
    }
    Ok((
        fields,
        DefosManifest {
            morph: *cfg,
            fields: entries,
        },
    ))
}

pub fn save_defos(dir: &Path, fields: &[VectorField], manifest: &DefosManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (u, e) in fields.iter().zip(&manifest.fields) {
        let mut alpha = vec![0.0; fields.len()];
        alpha[e.axis] = 1.0;
        write_dsdf(&dir.join(&e.file), &Field::Vector(u.clone()), &alpha)?;
    }
    std::fs::write(dir.join(DEFOS_MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_defos(dir: &Path) -> Result<(Vec<VectorField>, DefosManifest)> {
    let manifest: DefosManifest = serde_json::from_slice(&std::fs::read(dir.join(DEFOS_MANIFEST))?)?;
    let fields = manifest
        .fields
        .iter()
        .map(|e| Ok(read_vector(&dir.join(&e.file))?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields, manifest))
}

/// Trains the weight network and packages it, with the test split as
/// bundled references.
pub fn train_param_stage(
    ds: &Dataset,
    raw: &[VectorField],
    axes_of: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, LossCurve)> {
    let psi0 = ds.origin()?.clone();
    let seq = align_sequence_with_axes(raw, axes_of)?;
    let init = ParamNet::new(ParamNetConfig::new(ds.n_params(), seq.len()), cfg.seed)?;
    let (pnet, curve) = train_param(ds, &psi0, &seq, init, cfg)?;
    let sigma = cfg.sigma.unwrap_or_else(|| psi0.default_sigma());
    let references = ds
        .of_split(Split::Test)
        .into_iter()
        .map(|s| Reference {
            alpha: s.alpha.clone(),
            phi: s.phi.clone(),
        })
        .collect();
    let bundle = ModelBundle {
        model: Model {
            psi0,
            seq,
            pnet,
            dnet: None,
            fill_iters: cfg.fill_iters,
        },
        axes: ds.spec.axes(),
        sigma,
        region_factor: cfg.region_factor,
        ablation: None,
        references,
    };
    Ok((bundle.quantized()?, curve))
}

/// Number of stride-2 transposed convolutions used for a refinement grid:
/// the largest count up to `max` that divides every axis.
pub fn deconv_layers_for(defo_res: &[usize], max: usize) -> usize {
    (1..=max)
        .rev()
        .find(|&k| defo_res.iter().all(|&r| r % (1 << k) == 0))
        .unwrap_or(1)
}

pub fn defo_config(bundle: &ModelBundle, region_factor_: usize) -> Result<DefoNetConfig> {
    let res = bundle.sdf_res();
    if res.iter().any(|r| r % region_factor_ != 0) {
        return Err(Error::InvalidArgument(format!(
            "SDF resolution {res:?} is not divisible by region factor {region_factor_}"
        )));
    }
    let defo_res: Vec<usize> = res.iter().map(|r| r / region_factor_).collect();
    region_factor(res, &defo_res)?;
    let spacing = bundle.model.psi0.spacing() * region_factor_ as f64;
    let mut c = DefoNetConfig::new(bundle.n_params(), &defo_res, spacing);
    c.deconv_layers = deconv_layers_for(&defo_res, c.deconv_layers);
    Ok(c)
}

/// Trains the refinement network on top of the bundle's frozen weight
/// network.
pub fn train_defo_stage(bundle: &ModelBundle, ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, LossCurve)> {
    if ds.n_params() != bundle.n_params() {
        return Err(Error::LengthMismatch {
            expected: bundle.n_params(),
            got: ds.n_params(),
        });
    }
    let dcfg = defo_config(bundle, cfg.region_factor)?;
    let init = DefoNet::new(dcfg, cfg.seed.wrapping_add(1))?;
    let m = &bundle.model;
    let (dnet, curve) = train_defo(ds, &m.psi0, &m.seq, Some(&m.pnet), init, cfg)?;
    let mut out = bundle.clone();
    out.model.dnet = Some(dnet);
    out.model.fill_iters = cfg.fill_iters;
    out.region_factor = cfg.region_factor;
    Ok((out.quantized()?, curve))
}

/// Test-split ablation of a bundle, including the direct corner-blend
/// baseline when the dataset contains the corners.
pub fn evaluate(bundle: &ModelBundle, ds: &Dataset) -> Result<AblationReport> {
    let test = ds.of_split(Split::Test);
    let corners = ds.corners().ok();
    evaluate_ablation(&test, &bundle.model, None, corners.as_deref(), Some(bundle.sigma))
}
