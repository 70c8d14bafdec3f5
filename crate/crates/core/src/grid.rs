//! Dense, dimension-generic scalar and vector grids.
//!
//! Samples sit at cell centers: cell `k` along an axis is located at
//! `(k + 0.5) * spacing` in world units, the domain spans `[0, res * spacing]`
//! per axis and data is stored row-major with the last axis fastest.
//!
//! Scalar fields hold signed distances (outside positive). Sampling outside
//! the cell-center hull continues the field with unit slope along the outward
//! distance; vector fields are clamped (zero slope).

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_DIMS: usize = 4;

/// Default tanh emphasis width, in cells.
pub const DEFAULT_SIGMA_CELLS: f64 = 5.0;

/// Point or vector with up to [`MAX_DIMS`] components; only the first `dims`
/// entries are meaningful.
pub type Coord = [f64; MAX_DIMS];

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: usize,
    res: [usize; MAX_DIMS],
}

impl Shape {
    pub fn new(res: &[usize]) -> Result<Self> {
        if !(2..=MAX_DIMS).contains(&res.len()) {
            return Err(Error::InvalidShape {
                res: res.to_vec(),
                reason: format!("dimension must be in 2..={MAX_DIMS}"),
            });
        }
        if res.iter().any(|&n| n == 0) {
            return Err(Error::InvalidShape {
                res: res.to_vec(),
                reason: "every axis needs at least one cell".into(),
            });
        }
        let mut r = [1; MAX_DIMS];
        r[..res.len()].copy_from_slice(res);
        Ok(Shape {
            dims: res.len(),
            res: r,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn res(&self) -> &[usize] {
        &self.res[..self.dims]
    }

    pub fn len(&self) -> usize {
        self.res().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strides(&self) -> [usize; MAX_DIMS] {
        let mut s = [0; MAX_DIMS];
        let mut acc = 1;
        for a in (0..self.dims).rev() {
            s[a] = acc;
            acc *= self.res[a];
        }
        s
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for a in 0..self.dims {
            f = f * self.res[a] + idx[a];
        }
        f
    }

    pub fn unravel(&self, mut flat: usize) -> [usize; MAX_DIMS] {
        let mut idx = [0; MAX_DIMS];
        for a in (0..self.dims).rev() {
            idx[a] = flat % self.res[a];
            flat /= self.res[a];
        }
        idx
    }

    /// Shape with every axis multiplied by the matching factor.
    pub fn scaled(&self, factor: &[usize]) -> Result<Shape> {
        if factor.len() != self.dims {
            return Err(Error::DimsMismatch {
                expected: self.dims,
                got: factor.len(),
            });
        }
        let res: Vec<usize> = self.res().iter().zip(factor).map(|(r, f)| r * f).collect();
        Shape::new(&res)
    }

    /// Row-major iterator over all cell multi-indices.
    pub fn cells(&self) -> Cells {
        Cells {
            shape: *self,
            next: Some([0; MAX_DIMS]),
        }
    }

    /// Whether `idx` lies on at least one domain face.
    pub fn on_face(&self, idx: &[usize]) -> bool {
        (0..self.dims).any(|a| idx[a] == 0 || idx[a] + 1 == self.res[a])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape{:?}", self.res())
    }
}

pub struct Cells {
    shape: Shape,
    next: Option<[usize; MAX_DIMS]>,
}

impl Iterator for Cells {
    type Item = [usize; MAX_DIMS];

    fn next(&mut self) -> Option<Self::Item> {
        let cur = self.next?;
        let mut n = cur;
        let mut a = self.shape.dims;
        loop {
            if a == 0 {
                self.next = None;
                break;
            }
            a -= 1;
            n[a] += 1;
            if n[a] < self.shape.res[a] {
                self.next = Some(n);
                break;
            }
            n[a] = 0;
        }
        Some(cur)
    }
}

/// Per-axis interpolation stencil for a grid coordinate already clamped to the
/// cell-center hull.
#[derive(Clone, Copy)]
struct Stencil {
    lo: [usize; MAX_DIMS],
    hi: [usize; MAX_DIMS],
    t: [f64; MAX_DIMS],
}

impl Stencil {
    fn new(shape: &Shape, g: &Coord) -> Self {
        let mut st = Stencil {
            lo: [0; MAX_DIMS],
            hi: [0; MAX_DIMS],
            t: [0.0; MAX_DIMS],
        };
        for a in 0..shape.dims {
            let n = shape.res[a];
            if n == 1 {
                continue;
            }
            let lo = (g[a].floor() as isize).clamp(0, n as isize - 2) as usize;
            st.lo[a] = lo;
            st.hi[a] = lo + 1;
            st.t[a] = (g[a] - lo as f64).clamp(0.0, 1.0);
        }
        st
    }

    /// Calls `f(flat_index, weight)` for all 2^D corners in a fixed order.
    #[inline]
    fn for_each(&self, shape: &Shape, strides: &[usize; MAX_DIMS], mut f: impl FnMut(usize, f64)) {
        for mask in 0..(1usize << shape.dims) {
            let mut w = 1.0;
            let mut flat = 0;
            for a in 0..shape.dims {
                if mask >> a & 1 == 1 {
                    w *= self.t[a];
                    flat += self.hi[a] * strides[a];
                } else {
                    w *= 1.0 - self.t[a];
                    flat += self.lo[a] * strides[a];
                }
            }
            f(flat, w);
        }
    }

    /// Calls `f(flat_index, dweight/dg)` with the derivative of each corner
    /// weight with respect to the grid coordinate.
    #[inline]
    fn for_each_deriv(
        &self,
        shape: &Shape,
        strides: &[usize; MAX_DIMS],
        mut f: impl FnMut(usize, &Coord),
    ) {
        for mask in 0..(1usize << shape.dims) {
            let mut flat = 0;
            let mut w = [0.0; MAX_DIMS];
            let mut dw = [0.0; MAX_DIMS];
            for a in 0..shape.dims {
                let single = shape.res[a] == 1;
                if mask >> a & 1 == 1 {
                    w[a] = self.t[a];
                    dw[a] = if single { 0.0 } else { 1.0 };
                    flat += self.hi[a] * strides[a];
                } else {
                    w[a] = 1.0 - self.t[a];
                    dw[a] = if single { 0.0 } else { -1.0 };
                    flat += self.lo[a] * strides[a];
                }
            }
            let mut grad = [0.0; MAX_DIMS];
            for a in 0..shape.dims {
                let mut p = dw[a];
                for b in 0..shape.dims {
                    if b != a {
                        p *= w[b];
                    }
                }
                grad[a] = p;
            }
            f(flat, &grad);
        }
    }
}

fn clamp_to_hull(shape: &Shape, g: &Coord) -> Coord {
    let mut c = [0.0; MAX_DIMS];
    for a in 0..shape.dims {
        c[a] = g[a].clamp(0.0, (shape.res[a] - 1) as f64);
    }
    c
}

fn check_spacing(spacing: f64) -> Result<()> {
    if spacing.is_finite() && spacing > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing}")))
    }
}

/// Uniform spacing for a unit-length longest axis.
pub fn default_spacing(res: &[usize]) -> f64 {
    1.0 / res.iter().copied().max().unwrap_or(1) as f64
}

#[derive(Clone, PartialEq)]
pub struct ScalarField {
    shape: Shape,
    spacing: f64,
    data: Vec<f64>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("shape", &self.shape)
            .field("spacing", &self.spacing)
            .finish_non_exhaustive()
    }
}

impl ScalarField {
    pub fn new(shape: Shape, spacing: f64, data: Vec<f64>) -> Result<Self> {
        check_spacing(spacing)?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("scalar field cell {i}")));
        }
        Ok(ScalarField {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: Shape, spacing: f64) -> Self {
        ScalarField {
            shape,
            spacing,
            data: vec![0.0; shape.len()],
        }
    }

    /// Evaluates `f` at every cell center (world coordinates).
    pub fn from_fn(shape: Shape, spacing: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let data = shape
            .cells()
            .map(|idx| f(&cell_center(&shape, spacing, &idx)[..shape.dims]))
            .collect();
        ScalarField::new(shape, spacing, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.dims
    }

    pub fn res(&self) -> &[usize] {
        self.shape.res()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.shape.flat(idx)]
    }

    /// Volume of one cell, the per-sample weight of grid sums.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.shape.dims as i32)
    }

    pub fn default_sigma(&self) -> f64 {
        DEFAULT_SIGMA_CELLS * self.spacing
    }

    pub fn cell_center(&self, idx: &[usize]) -> Coord {
        cell_center(&self.shape, self.spacing, idx)
    }

    /// Sample at a continuous grid coordinate (cell `k` at `g = k`).
    pub(crate) fn sample_grid(&self, g: &Coord) -> f64 {
        let c = clamp_to_hull(&self.shape, g);
        let mut dist2 = 0.0;
        for a in 0..self.shape.dims {
            let d = (g[a] - c[a]) * self.spacing;
            dist2 += d * d;
        }
        let st = Stencil::new(&self.shape, &c);
        let strides = self.shape.strides();
        let mut acc = 0.0;
        st.for_each(&self.shape, &strides, |i, w| acc += w * self.data[i]);
        if dist2 > 0.0 {
            acc + dist2.sqrt()
        } else {
            acc
        }
    }

    /// Exact gradient (world units) of [`ScalarField::sample_grid`] with
    /// respect to position, including the extrapolation term. On cell
    /// boundaries the upper cell's one-sided difference is used.
    pub(crate) fn sample_gradient_grid(&self, g: &Coord) -> Coord {
        let c = clamp_to_hull(&self.shape, g);
        let mut out = [0.0; MAX_DIMS];
        let st = Stencil::new(&self.shape, &c);
        let strides = self.shape.strides();
        st.for_each_deriv(&self.shape, &strides, |i, dw| {
            let v = self.data[i];
            for a in 0..self.shape.dims {
                out[a] += dw[a] * v;
            }
        });
        let mut dist2 = 0.0;
        let mut outside = [0.0; MAX_DIMS];
        for a in 0..self.shape.dims {
            outside[a] = (g[a] - c[a]) * self.spacing;
            dist2 += outside[a] * outside[a];
            if outside[a] != 0.0 {
                // clamped axis: the interpolated part does not vary along it
                out[a] = 0.0;
            } else {
                out[a] /= self.spacing;
            }
        }
        if dist2 > 0.0 {
            let dist = dist2.sqrt();
            for a in 0..self.shape.dims {
                out[a] += outside[a] / dist;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_layout(&self, other: &ScalarField) -> Result<()> {
        same_shape(&self.shape, &other.shape)
    }
}

#[derive(Clone, PartialEq)]
pub struct VectorField {
    shape: Shape,
    spacing: f64,
    data: Vec<f64>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("shape", &self.shape)
            .field("spacing", &self.spacing)
            .finish_non_exhaustive()
    }
}

impl VectorField {
    pub fn new(shape: Shape, spacing: f64, data: Vec<f64>) -> Result<Self> {
        check_spacing(spacing)?;
        let expected = shape.len() * shape.dims;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "vector field cell {} component {}",
                i / shape.dims,
                i % shape.dims
            )));
        }
        Ok(VectorField {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: Shape, spacing: f64) -> Self {
        VectorField {
            shape,
            spacing,
            data: vec![0.0; shape.len() * shape.dims],
        }
    }

    pub fn constant(shape: Shape, spacing: f64, value: &[f64]) -> Result<Self> {
        if value.len() != shape.dims {
            return Err(Error::DimsMismatch {
                expected: shape.dims,
                got: value.len(),
            });
        }
        let data = (0..shape.len()).flat_map(|_| value.iter().copied()).collect();
        VectorField::new(shape, spacing, data)
    }

    pub fn from_fn(shape: Shape, spacing: f64, f: impl Fn(&[f64]) -> Coord) -> Result<Self> {
        let d = shape.dims;
        let mut data = Vec::with_capacity(shape.len() * d);
        for idx in shape.cells() {
            let v = f(&cell_center(&shape, spacing, &idx)[..d]);
            data.extend_from_slice(&v[..d]);
        }
        VectorField::new(shape, spacing, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.dims
    }

    pub fn res(&self) -> &[usize] {
        self.shape.res()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    /// Vector stored at flat cell index `cell`.
    pub fn at(&self, cell: usize) -> &[f64] {
        let d = self.shape.dims;
        &self.data[cell * d..(cell + 1) * d]
    }

    pub fn get(&self, idx: &[usize]) -> &[f64] {
        self.at(self.shape.flat(idx))
    }

    pub fn cell_center(&self, idx: &[usize]) -> Coord {
        cell_center(&self.shape, self.spacing, idx)
    }

    pub(crate) fn sample_grid(&self, g: &Coord) -> Coord {
        let d = self.shape.dims;
        let c = clamp_to_hull(&self.shape, g);
        let st = Stencil::new(&self.shape, &c);
        let strides = self.shape.strides();
        let mut out = [0.0; MAX_DIMS];
        st.for_each(&self.shape, &strides, |i, w| {
            for (o, v) in out.iter_mut().zip(&self.data[i * d..(i + 1) * d]) {
                *o += w * v;
            }
        });
        out
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &VectorField, s: f64) -> Result<()> {
        same_shape(&self.shape, &other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Squared L2 norm over all components.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn same_shape(a: &Shape, b: &Shape) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimsMismatch {
            expected: a.dims,
            got: b.dims,
        });
    }
    if a.res() != b.res() {
        return Err(Error::ResMismatch {
            left: a.res().to_vec(),
            right: b.res().to_vec(),
        });
    }
    Ok(())
}

pub fn cell_center(shape: &Shape, spacing: f64, idx: &[usize]) -> Coord {
    let mut x = [0.0; MAX_DIMS];
    for a in 0..shape.dims {
        x[a] = (idx[a] as f64 + 0.5) * spacing;
    }
    x
}

pub(crate) fn world_to_grid(x: &[f64], spacing: f64) -> Coord {
    let mut g = [0.0; MAX_DIMS];
    for (ga, xa) in g.iter_mut().zip(x) {
        *ga = xa / spacing - 0.5;
    }
    g
}

fn to_coord(x: &[f64]) -> Coord {
    let mut c = [0.0; MAX_DIMS];
    c[..x.len()].copy_from_slice(x);
    c
}

/// Grid coordinate, in `target` cells, of cell `idx` of a grid with `spacing`.
/// Exact (no rounding) when both grids coincide.
pub(crate) fn map_cell(idx: &[usize], spacing: f64, target_spacing: f64, dims: usize) -> Coord {
    let mut g = [0.0; MAX_DIMS];
    if spacing == target_spacing {
        for a in 0..dims {
            g[a] = idx[a] as f64;
        }
    } else {
        let r = spacing / target_spacing;
        for a in 0..dims {
            g[a] = (idx[a] as f64 + 0.5) * r - 0.5;
        }
    }
    g
}

/// Multilinear interpolation of cell-center values at world position `x`,
/// continued outside the cell-center hull with slope +1 along the outward
/// distance.
pub fn sample_linear(f: &ScalarField, x: &[f64]) -> f64 {
    f.sample_grid(&world_to_grid(&to_coord(x)[..f.dims()], f.spacing))
}

/// Position gradient of [`sample_linear`] (world units).
pub fn sample_linear_gradient(f: &ScalarField, x: &[f64]) -> Coord {
    f.sample_gradient_grid(&world_to_grid(&to_coord(x)[..f.dims()], f.spacing))
}

/// Component-wise multilinear interpolation, clamped outside the hull.
pub fn sample_linear_vec(v: &VectorField, x: &[f64]) -> Coord {
    v.sample_grid(&world_to_grid(&to_coord(x)[..v.dims()], v.spacing))
}

/// Finite-difference gradient in world units.
///
/// Central differences in the interior, one-sided differences on the faces.
/// A face cell whose one-sided gradient vanishes takes the extrapolation slope
/// instead: -1 on low faces, +1 on high faces, along each face normal.
pub fn gradient_fd(f: &ScalarField) -> Result<VectorField> {
    let shape = f.shape;
    if let Some(&n) = shape.res().iter().find(|&&n| n < 2) {
        return Err(Error::InvalidShape {
            res: shape.res().to_vec(),
            reason: format!("finite differences need at least 2 cells per axis, got {n}"),
        });
    }
    let d = shape.dims;
    let strides = shape.strides();
    let h = f.spacing;
    let mut out = vec![0.0; shape.len() * d];
    for (flat, idx) in shape.cells().enumerate() {
        let g = &mut out[flat * d..(flat + 1) * d];
        for a in 0..d {
            let k = idx[a];
            let n = shape.res[a];
            let s = strides[a];
            g[a] = if k == 0 {
                (f.data[flat + s] - f.data[flat]) / h
            } else if k + 1 == n {
                (f.data[flat] - f.data[flat - s]) / h
            } else {
                (f.data[flat + s] - f.data[flat - s]) / (2.0 * h)
            };
        }
        if shape.on_face(&idx) && g.iter().map(|v| v * v).sum::<f64>() <= 1e-24 {
            for a in 0..d {
                if idx[a] == 0 {
                    g[a] = -1.0;
                } else if idx[a] + 1 == shape.res[a] {
                    g[a] = 1.0;
                }
            }
        }
    }
    VectorField::new(shape, h, out)
}

/// Element-wise `tanh(value / sigma)`.
pub fn tanh_transform(f: &ScalarField, sigma: f64) -> ScalarField {
    f.map(|v| (v / sigma).tanh())
}

fn resampled_spacing(shape: &Shape, spacing: f64, new_res: &[usize]) -> Result<(Shape, f64)> {
    let new_shape = Shape::new(new_res)?;
    same_dims(shape.dims, new_shape.dims)?;
    let s0 = spacing * shape.res[0] as f64 / new_res[0] as f64;
    for a in 1..shape.dims {
        let s = spacing * shape.res[a] as f64 / new_res[a] as f64;
        if ((s - s0) / s0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "resampling {:?} to {:?} would make the spacing non-uniform",
                shape.res(),
                new_res
            )));
        }
    }
    Ok((new_shape, s0))
}

fn same_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimsMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// Multilinear resampling onto `new_res` cells covering the same domain.
pub fn resample(f: &ScalarField, new_res: &[usize]) -> Result<ScalarField> {
    if new_res == f.res() {
        return Ok(f.clone());
    }
    let (shape, spacing) = resampled_spacing(&f.shape, f.spacing, new_res)?;
    let data = shape
        .cells()
        .map(|idx| f.sample_grid(&map_cell(&idx, spacing, f.spacing, shape.dims)))
        .collect();
    ScalarField::new(shape, spacing, data)
}

/// Vector counterpart of [`resample`]; magnitudes stay in world units.
pub fn resample_vec(v: &VectorField, new_res: &[usize]) -> Result<VectorField> {
    if new_res == v.res() {
        return Ok(v.clone());
    }
    let (shape, spacing) = resampled_spacing(&v.shape, v.spacing, new_res)?;
    let d = shape.dims;
    let mut data = Vec::with_capacity(shape.len() * d);
    for idx in shape.cells() {
        let s = v.sample_grid(&map_cell(&idx, spacing, v.spacing, d));
        data.extend_from_slice(&s[..d]);
    }
    VectorField::new(shape, spacing, data)
}

/// Piecewise-constant upsampling: every coarse vector is replicated over its
/// `factor^D` block of fine cells.
pub fn upsample_constant(w: &VectorField, factor: usize) -> Result<VectorField> {
    if factor == 0 {
        return Err(Error::InvalidArgument("region factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(w.clone());
    }
    let d = w.dims();
    let fine = w.shape.scaled(&vec![factor; d])?;
    let mut data = Vec::with_capacity(fine.len() * d);
    let mut coarse = [0; MAX_DIMS];
    for idx in fine.cells() {
        for a in 0..d {
            coarse[a] = idx[a] / factor;
        }
        data.extend_from_slice(w.get(&coarse[..d]));
    }
    VectorField::new(fine, w.spacing / factor as f64, data)
}

/// Adjoint of [`upsample_constant`]: sums fine-cell vectors over each coarse
/// region.
pub fn region_sum(fine: &VectorField, factor: usize) -> Result<VectorField> {
    let d = fine.dims();
    if factor == 0 || fine.res().iter().any(|&n| n % factor != 0) {
        return Err(Error::InvalidArgument(format!(
            "resolution {:?} is not a multiple of region factor {factor}",
            fine.res()
        )));
    }
    let coarse_res: Vec<usize> = fine.res().iter().map(|n| n / factor).collect();
    let coarse = Shape::new(&coarse_res)?;
    let mut data = vec![0.0; coarse.len() * d];
    let mut c = [0; MAX_DIMS];
    for (flat, idx) in fine.shape.cells().enumerate() {
        for a in 0..d {
            c[a] = idx[a] / factor;
        }
        let j = coarse.flat(&c[..d]);
        for k in 0..d {
            data[j * d + k] += fine.data[flat * d + k];
        }
    }
    VectorField::new(coarse, fine.spacing * factor as f64, data)
}
