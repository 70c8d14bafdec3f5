//! Semi-Lagrangian advection.
//!
//! [`advect_backward`] gathers `f(x - d(x))`. [`advect_forward`] is the
//! inverse step: every cell pushes its value to `x + offset(x)`, contributions
//! are normalized by their interpolation weights and cells nobody reached are
//! filled from their initialized face neighbors.

use crate::error::{Error, Result};
use crate::grid::{map_cell, same_shape, Coord, ScalarField, Shape, VectorField, MAX_DIMS};

pub const DEFAULT_FILL_ITERS: usize = 4;

fn check_domains(a: &Shape, ha: f64, b: &Shape, hb: f64) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch {
            expected: a.dims(),
            got: b.dims(),
        });
    }
    for (ra, rb) in a.res().iter().zip(b.res()) {
        let (ea, eb) = (*ra as f64 * ha, *rb as f64 * hb);
        if ((ea - eb) / ea).abs() > 1e-9 {
            return Err(Error::ResMismatch {
                left: a.res().to_vec(),
                right: b.res().to_vec(),
            });
        }
    }
    Ok(())
}

/// Displacement-adjusted grid coordinate `idx - d(x)/h` for cell `idx` of a
/// grid with spacing `h`, sampling `d` at that cell's center.
#[inline]
pub(crate) fn departure(idx: &[usize], h: f64, d: &VectorField) -> Coord {
    let dims = d.dims();
    let disp = d.sample_grid(&map_cell(idx, h, d.spacing(), dims));
    let mut g = [0.0; MAX_DIMS];
    for a in 0..dims {
        g[a] = idx[a] as f64 - disp[a] / h;
    }
    g
}

/// `out(x) = f(x - d(x))` at every cell center of `f`.
pub fn advect_backward(f: &ScalarField, d: &VectorField) -> Result<ScalarField> {
    let shape = f.shape();
    check_domains(&shape, f.spacing(), &d.shape(), d.spacing())?;
    let h = f.spacing();
    let data = shape
        .cells()
        .map(|idx| f.sample_grid(&departure(&idx, h, d)))
        .collect();
    ScalarField::new(shape, h, data)
}

/// Component-wise `out(x) = v(x - d(x))`, clamped outside the domain.
pub fn advect_backward_vec(v: &VectorField, d: &VectorField) -> Result<VectorField> {
    let shape = v.shape();
    check_domains(&shape, v.spacing(), &d.shape(), d.spacing())?;
    let h = v.spacing();
    let dims = shape.dims();
    let mut data = Vec::with_capacity(shape.len() * dims);
    for idx in shape.cells() {
        let s = v.sample_grid(&departure(&idx, h, d));
        data.extend_from_slice(&s[..dims]);
    }
    VectorField::new(shape, h, data)
}

/// Normalizing scatter target of [`advect_forward`].
#[derive(Clone, Debug)]
pub struct ScatterAccumulator {
    shape: Shape,
    pub value_sum: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub filled: Vec<bool>,
}

impl ScatterAccumulator {
    pub fn new(shape: Shape) -> Self {
        ScatterAccumulator {
            shape,
            value_sum: vec![0.0; shape.len() * shape.dims()],
            weight_sum: vec![0.0; shape.len()],
            filled: vec![false; shape.len()],
        }
    }

    /// Distributes `value` to the multilinear stencil around grid coordinate
    /// `g`. Destinations outside the domain box are dropped; returns whether
    /// the value was accepted.
    pub fn scatter(&mut self, g: &Coord, value: &[f64]) -> bool {
        let dims = self.shape.dims();
        let res = self.shape.res();
        let strides = self.shape.strides();
        let mut lo = [0usize; MAX_DIMS];
        let mut t = [0.0; MAX_DIMS];
        let mut two = [false; MAX_DIMS];
        for a in 0..dims {
            let n = res[a];
            if !(g[a] >= -0.5 && g[a] <= n as f64 - 0.5) {
                return false;
            }
            let c = g[a].clamp(0.0, (n - 1) as f64);
            if n == 1 {
                continue;
            }
            let l = (c.floor() as usize).min(n - 2);
            lo[a] = l;
            t[a] = c - l as f64;
            two[a] = true;
        }
        for mask in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut flat = 0;
            let mut skip = false;
            for a in 0..dims {
                if mask >> a & 1 == 1 {
                    if !two[a] {
                        skip = true;
                        break;
                    }
                    w *= t[a];
                    flat += (lo[a] + 1) * strides[a];
                } else {
                    w *= 1.0 - t[a];
                    flat += lo[a] * strides[a];
                }
            }
            if skip || w == 0.0 {
                continue;
            }
            self.weight_sum[flat] += w;
            for k in 0..dims {
                self.value_sum[flat * dims + k] += w * value[k];
            }
        }
        true
    }

    pub fn total_weight(&self) -> f64 {
        self.weight_sum.iter().sum()
    }

    /// Normalizes, runs `fill_iters` rounds of face-neighbor averaging into
    /// unreached cells and zeroes whatever is still empty.
    pub fn finish(mut self, fill_iters: usize, spacing: f64) -> Result<VectorField> {
        let dims = self.shape.dims();
        let n = self.shape.len();
        let mut out = vec![0.0; n * dims];
        for c in 0..n {
            let w = self.weight_sum[c];
            if w > 0.0 {
                self.filled[c] = true;
                for k in 0..dims {
                    out[c * dims + k] = self.value_sum[c * dims + k] / w;
                }
            }
        }
        let strides = self.shape.strides();
        let res = self.shape.res().to_vec();
        for _ in 0..fill_iters {
            if self.filled.iter().all(|&f| f) {
                break;
            }
            let prev = self.filled.clone();
            let snapshot = out.clone();
            for (c, idx) in self.shape.cells().enumerate() {
                if prev[c] {
                    continue;
                }
                let mut acc = [0.0; MAX_DIMS];
                let mut count = 0usize;
                for a in 0..dims {
                    let s = strides[a];
                    if idx[a] > 0 && prev[c - s] {
                        count += 1;
                        for k in 0..dims {
                            acc[k] += snapshot[(c - s) * dims + k];
                        }
                    }
                    if idx[a] + 1 < res[a] && prev[c + s] {
                        count += 1;
                        for k in 0..dims {
                            acc[k] += snapshot[(c + s) * dims + k];
                        }
                    }
                }
                if count > 0 {
                    self.filled[c] = true;
                    for k in 0..dims {
                        out[c * dims + k] = acc[k] / count as f64;
                    }
                }
            }
        }
        VectorField::new(self.shape, spacing, out)
    }
}

/// Forward (scatter) advection: the value at `x` is pushed to `x + offset(x)`.
pub fn advect_forward(src: &VectorField, offset: &VectorField, fill_iters: usize) -> Result<VectorField> {
    let acc = scatter_forward(src, offset)?;
    if fill_iters < 1 {
        return Err(Error::InvalidArgument("fill_iters must be at least 1".into()));
    }
    acc.finish(fill_iters, src.spacing())
}

/// Scatter phase of [`advect_forward`], exposed for diagnostics.
pub fn scatter_forward(src: &VectorField, offset: &VectorField) -> Result<ScatterAccumulator> {
    same_shape(&src.shape(), &offset.shape())?;
    let shape = src.shape();
    let dims = shape.dims();
    let h = src.spacing();
    let mut acc = ScatterAccumulator::new(shape);
    for (c, idx) in shape.cells().enumerate() {
        let off = offset.at(c);
        let mut g = [0.0; MAX_DIMS];
        for a in 0..dims {
            g[a] = idx[a] as f64 + off[a] / h;
        }
        acc.scatter(&g, src.at(c));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(r: &[usize]) -> Shape {
        Shape::new(r).unwrap()
    }

    #[test]
    fn backward_zero_is_identity() {
        let s = shape(&[7, 5]);
        let f = ScalarField::from_fn(s, 1.0 / 7.0, |x| (x[0] * 3.1).sin() * x[1]).unwrap();
        let d = VectorField::zeros(s, 1.0 / 7.0);
        assert_eq!(advect_backward(&f, &d).unwrap(), f);
        // coarser zero field
        let dc = VectorField::zeros(shape(&[7, 5]), 1.0 / 7.0);
        assert_eq!(advect_backward(&f, &dc).unwrap().values(), f.values());
    }

    #[test]
    fn backward_ramp_shift_uses_unit_outward_slope() {
        let s = shape(&[1, 4]);
        let f = ScalarField::new(s, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let d = VectorField::constant(s, 1.0, &[0.0, 1.0]).unwrap();
        let out = advect_backward(&f, &d).unwrap();
        assert_eq!(out.values(), &[1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_round_trip_on_circle() {
        let s = shape(&[64, 64]);
        let h = 1.0 / 64.0;
        let f = ScalarField::from_fn(s, h, |x| {
            ((x[0] - 0.5).powi(2) + (x[1] - 0.45).powi(2)).sqrt() - 0.2
        })
        .unwrap();
        let d = VectorField::constant(s, h, &[0.05, -0.031]).unwrap();
        let back = advect_backward(&advect_backward(&f, &d).unwrap(), &d.scaled(-1.0)).unwrap();
        for idx in s.cells() {
            if s.on_face(&idx) || idx[0] < 5 || idx[1] > 58 {
                continue;
            }
            assert!((back.get(&idx) - f.get(&idx)).abs() < 2.0 * h);
        }
    }

    #[test]
    fn backward_dims_mismatch() {
        let f = ScalarField::zeros(shape(&[4, 4]), 0.25);
        let d = VectorField::zeros(shape(&[4, 4, 4]), 0.25);
        assert!(matches!(advect_backward(&f, &d), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn backward_vec_cases() {
        let s = shape(&[6, 6]);
        let h = 1.0 / 6.0;
        let c = VectorField::constant(s, h, &[0.4, -0.2]).unwrap();
        let d = VectorField::from_fn(s, h, |x| [x[1] * 0.3, -x[0], 0.0, 0.0]).unwrap();
        let out = advect_backward_vec(&c, &d).unwrap();
        for cell in 0..s.len() {
            assert!((out.at(cell)[0] - 0.4).abs() < 1e-12);
        }
        assert_eq!(advect_backward_vec(&d, &VectorField::zeros(s, h)).unwrap(), d);

        let ramp = VectorField::from_fn(s, h, |x| [x[1], 0.0, 0.0, 0.0]).unwrap();
        let shift = VectorField::constant(s, h, &[0.0, h]).unwrap();
        let out = advect_backward_vec(&ramp, &shift).unwrap();
        for idx in s.cells() {
            if idx[1] == 0 {
                continue;
            }
            let x = ramp.cell_center(&idx);
            assert!((out.get(&idx)[0] - (x[1] - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_zero_offset_is_identity() {
        let s = shape(&[5, 4]);
        let v = VectorField::from_fn(s, 0.2, |x| [x[0].powi(2), -x[1], 0.0, 0.0]).unwrap();
        let out = advect_forward(&v, &VectorField::zeros(s, 0.2), 4).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn forward_integer_translation_on_strip() {
        let s = shape(&[1, 8]);
        let src = VectorField::from_fn(s, 1.0, |x| [0.0, x[1], 0.0, 0.0]).unwrap();
        let off = VectorField::constant(s, 1.0, &[0.0, 2.0]).unwrap();
        let out = advect_forward(&src, &off, 1).unwrap();
        let comp: Vec<f64> = (0..8).map(|c| out.at(c)[1]).collect();
        // cells 2..8 receive cells 0..6; cell 1 averages its filled neighbor
        // only, cell 0 had no filled neighbor after one round
        assert_eq!(comp, vec![0.0, 0.5, 0.5, 1.5, 2.5, 3.5, 4.5, 5.5]);
        let out2 = advect_forward(&src, &off, 2).unwrap();
        assert_eq!(out2.at(0)[1], 0.5);
    }

    #[test]
    fn forward_normalizes_overlapping_contributions() {
        let s = shape(&[1, 4]);
        let src = VectorField::new(s, 1.0, vec![0.0, 0.0, 0.0, 1.0, 0.0, 5.0, 0.0, 0.0]).unwrap();
        // cell 1 moves +0.5, cell 2 moves -0.5: both land halfway between
        let off = VectorField::new(s, 1.0, vec![0.0, 0.0, 0.0, 0.5, 0.0, -0.5, 0.0, 0.0]).unwrap();
        let acc = scatter_forward(&src, &off).unwrap();
        assert_eq!(acc.weight_sum[1], 1.0);
        assert_eq!(acc.weight_sum[2], 1.0);
        // cell 1 receives 0.5*(cell1) + 0.5*(cell2) = (1+5)/2
        assert_eq!(acc.value_sum[3] / acc.weight_sum[1], 3.0);
    }

    #[test]
    fn forward_rejects_zero_fill() {
        let s = shape(&[2, 2]);
        let v = VectorField::zeros(s, 0.5);
        assert!(advect_forward(&v, &v, 0).is_err());
    }

    proptest! {
        #[test]
        fn forward_weight_conservation_and_hull(
            seed in proptest::collection::vec((-2.5f64..2.5, -2.5f64..2.5, -1.0f64..1.0), 36)
        ) {
            let s = shape(&[6, 6]);
            let h = 0.5;
            let mut src = Vec::new();
            let mut off = Vec::new();
            for (a, b, v) in &seed {
                off.extend_from_slice(&[a * h, b * h]);
                src.extend_from_slice(&[*v, -v]);
            }
            let src = VectorField::new(s, h, src).unwrap();
            let off = VectorField::new(s, h, off).unwrap();
            let acc = scatter_forward(&src, &off).unwrap();
            let mut inside = 0usize;
            for (c, idx) in s.cells().enumerate() {
                let o = off.at(c);
                let g0 = idx[0] as f64 + o[0] / h;
                let g1 = idx[1] as f64 + o[1] / h;
                if (-0.5..=5.5).contains(&g0) && (-0.5..=5.5).contains(&g1) {
                    inside += 1;
                }
            }
            prop_assert!((acc.total_weight() - inside as f64).abs() < 1e-9);
            let lo = src.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = advect_forward(&src, &off, 4).unwrap();
            for c in 0..s.len() {
                if acc.weight_sum[c] > 0.0 {
                    for &v in out.at(c) {
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
