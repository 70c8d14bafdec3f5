//! Synthetic parametrized SDF families, dataset splits and persistence, and
//! the iterative morph solver that produces endpoint deformations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{default_spacing, resample, resample_vec, Coord, ScalarField, Shape, VectorField, MAX_DIMS};
use crate::io::{quantize_scalar, read_scalar, write_dsdf, Field};
use crate::loss::{grad_defo_with, surface_loss, LossOptions};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Basin plus a drop whose size (axis 0) and horizontal position (axis 1)
    /// vary, plus a bump on the basin whose position depends on the product
    /// of both parameters.
    Drop2d,
    /// A single circle, same axes as `Drop2d`.
    Circle2d,
    /// Four-dimensional basin and drop; one parameter moves the drop.
    Drop4d,
}

impl Family {
    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "drop2d" => Ok(Family::Drop2d),
            "circle2d" => Ok(Family::Circle2d),
            "drop4d" => Ok(Family::Drop4d),
            _ => Err(Error::InvalidArgument(format!("unknown family {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Drop2d => "drop2d",
            Family::Circle2d => "circle2d",
            Family::Drop4d => "drop4d",
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Family::Drop4d => 4,
            _ => 2,
        }
    }

    pub fn axis_names(&self) -> &'static [&'static str] {
        match self {
            Family::Drop2d | Family::Circle2d => &["size", "position"],
            Family::Drop4d => &["position"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisInfo {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamilySpec {
    pub family: Family,
    pub res: Vec<usize>,
    /// Scales the part of the family that endpoint deformations cannot reach.
    pub strength: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn sphere(x: &[f64], c: &[f64], r: f64) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() - r
}

impl SyntheticFamilySpec {
    pub fn new(family: Family, res: usize) -> Self {
        SyntheticFamilySpec {
            family,
            res: vec![res; family.dims()],
            strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.res.len() != self.family.dims() {
            return Err(Error::DimsMismatch {
                expected: self.family.dims(),
                got: self.res.len(),
            });
        }
        if !(self.strength.is_finite() && self.strength >= 0.0) {
            return Err(Error::InvalidArgument(format!("strength must be >= 0, got {}", self.strength)));
        }
        Shape::new(&self.res)?;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.family.axis_names().len()
    }

    pub fn axes(&self) -> Vec<AxisInfo> {
        self.family
            .axis_names()
            .iter()
            .map(|n| AxisInfo {
                name: n.to_string(),
                min: 0.0,
                max: 1.0,
            })
            .collect()
    }

    pub fn spacing(&self) -> f64 {
        default_spacing(&self.res)
    }

    /// Analytic signed distance (outside positive) at world position `x`.
    pub fn sdf_at(&self, alpha: &[f64], x: &[f64]) -> f64 {
        match self.family {
            Family::Drop2d => {
                let basin = x[1] - 0.25;
                let drop = sphere(x, &[lerp(0.3, 0.7, alpha[1]), 0.65], lerp(0.08, 0.16, alpha[0]));
                let bump_x = 0.3 + self.strength * 0.25 * alpha[0] * alpha[1];
                let bump = sphere(x, &[bump_x, 0.25], 0.07);
                basin.min(drop).min(bump)
            }
            Family::Circle2d => sphere(x, &[lerp(0.35, 0.65, alpha[1]), 0.5], lerp(0.15, 0.3, alpha[0])),
            Family::Drop4d => {
                let basin = x[1] - 0.25;
                let drop = sphere(x, &[lerp(0.35, 0.65, alpha[0]), 0.62, 0.5, 0.5], 0.18);
                basin.min(drop)
            }
        }
    }

    pub fn field(&self, alpha: &[f64]) -> Result<ScalarField> {
        if alpha.len() != self.n_params() {
            return Err(Error::LengthMismatch {
                expected: self.n_params(),
                got: alpha.len(),
            });
        }
        ScalarField::from_fn(Shape::new(&self.res)?, self.spacing(), |x| self.sdf_at(alpha, x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub alpha: Vec<f64>,
    pub phi: ScalarField,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticFamilySpec,
    pub samples_per_axis: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    pub fn of_split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn shape(&self) -> Result<Shape> {
        Shape::new(&self.spec.res)
    }

    /// The sample whose parameters equal `alpha` exactly.
    pub fn find(&self, alpha: &[f64]) -> Option<&Sample> {
        self.samples.iter().find(|s| s.alpha == alpha)
    }

    /// The undeformed input surface at the parameter origin.
    pub fn origin(&self) -> Result<&ScalarField> {
        let zero = vec![0.0; self.n_params()];
        self.find(&zero)
            .map(|s| &s.phi)
            .ok_or_else(|| Error::Manifest("dataset has no sample at the parameter origin".into()))
    }

    /// Samples at the unit corners `e_i`, one per parameter axis.
    pub fn axis_corners(&self) -> Result<Vec<&ScalarField>> {
        (0..self.n_params())
            .map(|i| {
                let mut a = vec![0.0; self.n_params()];
                a[i] = 1.0;
                self.find(&a)
                    .map(|s| &s.phi)
                    .ok_or_else(|| Error::Manifest(format!("dataset has no sample at corner {a:?}")))
            })
            .collect()
    }

    /// Samples at all `2^N` parameter corners, ordered by bit pattern with
    /// axis 0 as the lowest bit.
    pub fn corners(&self) -> Result<Vec<&ScalarField>> {
        let n = self.n_params();
        (0..1usize << n)
            .map(|mask| {
                let a: Vec<f64> = (0..n).map(|i| (mask >> i & 1) as f64).collect();
                self.find(&a)
                    .map(|s| &s.phi)
                    .ok_or_else(|| Error::Manifest(format!("dataset has no sample at corner {a:?}")))
            })
            .collect()
    }
}

/// Samples the family on a regular parameter grid including both ends of
/// every axis. Fields are rounded to f32 so a stored copy loads back equal.
/// All samples start in the training split.
pub fn gen_synthetic(spec: &SyntheticFamilySpec, samples_per_axis: &[usize]) -> Result<Dataset> {
    spec.validate()?;
    if samples_per_axis.len() != spec.n_params() {
        return Err(Error::LengthMismatch {
            expected: spec.n_params(),
            got: samples_per_axis.len(),
        });
    }
    if samples_per_axis.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument("each parameter axis needs at least 2 samples".into()));
    }
    let total: usize = samples_per_axis.iter().product();
    let mut samples = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut alpha = vec![0.0; samples_per_axis.len()];
        for a in (0..samples_per_axis.len()).rev() {
            let n = samples_per_axis[a];
            alpha[a] = (rem % n) as f64 / (n - 1) as f64;
            rem /= n;
        }
        let phi = quantize_scalar(&spec.field(&alpha)?);
        samples.push(Sample {
            alpha,
            phi,
            split: Split::Train,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples_per_axis: samples_per_axis.to_vec(),
        samples,
    })
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {f}")))
    }
}

/// Number of samples a fraction selects: `floor(n * f)`, tolerant of the
/// rounding error in fractions such as `100 / 2156`.
pub fn split_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Seeded shuffle; the first `floor(n*val)` samples become validation, the
/// next `floor(n*test)` test, the rest training.
pub fn split(mut dataset: Dataset, seed: u64, val_fraction: f64, test_fraction: f64) -> Result<Dataset> {
    check_fraction("validation fraction", val_fraction)?;
    check_fraction("test fraction", test_fraction)?;
    if val_fraction + test_fraction >= 1.0 {
        return Err(Error::InvalidArgument("fractions must sum to less than 1".into()));
    }
    let n = dataset.samples.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_val = split_count(n, val_fraction);
    let n_test = split_count(n, test_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        dataset.samples[i].split = if rank < n_val {
            Split::Validation
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub alpha: Vec<f64>,
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: Family,
    pub res: Vec<usize>,
    pub spacing: f64,
    pub strength: f64,
    pub samples_per_axis: Vec<usize>,
    pub axes: Vec<AxisInfo>,
    pub samples: Vec<ManifestSample>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let file = format!("sample_{i:05}.dsdf");
        write_dsdf(&dir.join(&file), &Field::Scalar(s.phi.clone()), &s.alpha)?;
        entries.push(ManifestSample {
            alpha: s.alpha.clone(),
            file,
            split: s.split,
        });
    }
    let manifest = Manifest {
        family: dataset.spec.family,
        res: dataset.spec.res.clone(),
        spacing: dataset.spec.spacing(),
        strength: dataset.spec.strength,
        samples_per_axis: dataset.samples_per_axis.clone(),
        axes: dataset.spec.axes(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let spec = SyntheticFamilySpec {
        family: manifest.family,
        res: manifest.res.clone(),
        strength: manifest.strength,
    };
    spec.validate()?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let (phi, alpha) = read_scalar(&dir.join(&entry.file))?;
        if phi.res() != manifest.res.as_slice() {
            return Err(Error::Manifest(format!(
                "{} has resolution {:?}, manifest says {:?}",
                entry.file,
                phi.res(),
                manifest.res
            )));
        }
        let stored: Vec<f64> = entry.alpha.iter().map(|&a| a as f32 as f64).collect();
        if alpha != stored {
            return Err(Error::Manifest(format!(
                "{} holds parameters {alpha:?}, manifest says {:?}",
                entry.file, entry.alpha
            )));
        }
        samples.push(Sample {
            alpha: entry.alpha.clone(),
            phi,
            split: entry.split,
        });
    }
    Ok(Dataset {
        spec,
        samples_per_axis: manifest.samples_per_axis,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphConfig {
    /// Weight of the smoothness term `lambda * sum |grad u|^2 dx`.
    pub lambda: f64,
    /// Outer iterations per level.
    pub iters: usize,
    pub levels: usize,
    /// Jacobi sweeps of the inner smoothing solve per iteration.
    pub inner_sweeps: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig {
            lambda: 0.1,
            iters: 200,
            levels: 3,
            inner_sweeps: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MorphResult {
    pub field: VectorField,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when the full-resolution data term did not decrease.
    pub warning: bool,
}

fn level_res(res: &[usize], level: usize, levels: usize) -> Vec<usize> {
    let f = 1usize << (levels - 1 - level);
    res.iter().map(|&r| (r / f).max(2)).collect()
}

/// One proximal step on `u`: the data term is linearized with curvature
/// `dx / sigma^2`, the smoothness term is kept exact and the resulting
/// linear system is relaxed with Jacobi sweeps.
fn morph_step(
    from: &ScalarField,
    to: &ScalarField,
    u: &VectorField,
    cfg: &MorphConfig,
) -> Result<VectorField> {
    let opts = LossOptions::default();
    let g = grad_defo_with(from, to, u, 1, &opts)?.grad;
    let shape = u.shape();
    let d = shape.dims();
    let h = u.spacing();
    let dx = from.cell_volume();
    let sigma = from.default_sigma();
    let c_data = dx / (sigma * sigma);
    let s = 2.0 * cfg.lambda * dx / (h * h);
    let strides = shape.strides();
    let n = shape.len();
    let neighbours: Vec<Vec<usize>> = shape
        .cells()
        .enumerate()
        .map(|(flat, idx)| {
            let mut nb = Vec::with_capacity(2 * d);
            for a in 0..d {
                if idx[a] > 0 {
                    nb.push(flat - strides[a]);
                }
                if idx[a] + 1 < shape.res()[a] {
                    nb.push(flat + strides[a]);
                }
            }
            nb
        })
        .collect();
    let uv = u.values();
    // right-hand side: -(g + S u)
    let mut rhs = vec![0.0; n * d];
    for k in 0..n {
        for a in 0..d {
            let mut lap = 0.0;
            for &m in &neighbours[k] {
                lap += uv[k * d + a] - uv[m * d + a];
            }
            rhs[k * d + a] = -(g.values()[k * d + a] + s * lap);
        }
    }
    let mut delta = vec![0.0; n * d];
    let mut next = vec![0.0; n * d];
    for _ in 0..cfg.inner_sweeps {
        for k in 0..n {
            let diag = c_data + s * neighbours[k].len() as f64;
            for a in 0..d {
                let mut off = 0.0;
                for &m in &neighbours[k] {
                    off += delta[m * d + a];
                }
                next[k * d + a] = (rhs[k * d + a] + s * off) / diag;
            }
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let data: Vec<f64> = uv.iter().zip(&delta).map(|(a, b)| a + b).collect();
    VectorField::new(shape, h, data)
}

/// Displacement `u` such that `psi_from(x - u(x))` approximates `psi_to`,
/// solved coarse to fine.
pub fn compute_endpoint_deformation(
    psi_from: &ScalarField,
    psi_to: &ScalarField,
    cfg: &MorphConfig,
) -> Result<MorphResult> {
    crate::grid::same_shape(&psi_from.shape(), &psi_to.shape())?;
    if cfg.levels == 0 || !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid morph configuration {cfg:?}")));
    }
    let initial_loss = surface_loss(psi_from, psi_to)?;
    let mut u: Option<VectorField> = None;
    for level in 0..cfg.levels {
        let res = level_res(psi_from.res(), level, cfg.levels);
        let from = resample(psi_from, &res)?;
        let to = resample(psi_to, &res)?;
        let mut cur = match u.take() {
            Some(prev) => resample_vec(&prev, &res)?,
            None => VectorField::zeros(from.shape(), from.spacing()),
        };
        for _ in 0..cfg.iters {
            cur = morph_step(&from, &to, &cur, cfg)?;
        }
        u = Some(cur);
    }
    let field = u.expect("at least one level");
    let final_loss = surface_loss(&crate::advect::advect_backward(psi_from, &field)?, psi_to)?;
    Ok(MorphResult {
        field,
        initial_loss,
        final_loss,
        warning: !(final_loss < initial_loss) && initial_loss > 0.0,
    })
}

/// One endpoint deformation per parameter axis, from the origin sample to
/// the matching unit corner.
pub fn endpoint_deformations(dataset: &Dataset, cfg: &MorphConfig) -> Result<Vec<MorphResult>> {
    let psi0 = dataset.origin()?;
    dataset
        .axis_corners()?
        .into_iter()
        .map(|target| compute_endpoint_deformation(psi0, target, cfg))
        .collect()
}

/// Analytic translation-then-expansion pair: `u_1` translates a circle at
/// `c0` by `shift`, `u_2` expands the translated circle from `r0` to `r1`.
/// Returns `(psi0, [u_1, u_2])`.
pub fn translation_expansion(
    res: usize,
    c0: [f64; 2],
    r0: f64,
    r1: f64,
    shift: [f64; 2],
) -> Result<(ScalarField, Vec<VectorField>)> {
    let shape = Shape::new(&[res, res])?;
    let h = default_spacing(&[res, res]);
    let psi0 = ScalarField::from_fn(shape, h, |x| sphere(x, &c0, r0))?;
    let u1 = VectorField::constant(shape, h, &shift)?;
    let c1 = [c0[0] + shift[0], c0[1] + shift[1]];
    let falloff = 2.0 * (r1 - r0).abs().max(h);
    let u2 = VectorField::from_fn(shape, h, |x| {
        let dx = [x[0] - c1[0], x[1] - c1[1]];
        let rho = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
        let env = (-((rho - r1).max(0.0) / falloff).powi(2)).exp();
        let k = (r1 - r0) / r1 * env;
        let mut out: Coord = [0.0; MAX_DIMS];
        out[0] = k * dx[0];
        out[1] = k * dx[1];
        out
    })?;
    Ok((psi0, vec![u1, u2]))
}
