//! Small neural-network stack with explicit forward and backward passes.
//!
//! Parameters of a network live in one flat vector in declaration order
//! (layer by layer, weights before biases), which keeps ADAM, serialization
//! and finite-difference checks trivial. Every parameter update bumps a
//! revision counter; forward caches remember the revision they were built
//! against so a backward pass with a stale cache is rejected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::WeightVector;
use crate::error::{Error, Result};
use crate::grid::{Shape, VectorField, MAX_DIMS};

pub const DECONV_KERNEL: usize = 4;
pub const DECONV_STRIDE: usize = 2;
pub const DECONV_PAD: usize = 1;

/// Fully connected layer, weights stored `[out][in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    fn forward(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = &params[self.offset..self.offset + self.inputs * self.outputs];
        let b = &params[self.offset + self.inputs * self.outputs..self.offset + self.param_count()];
        out.clear();
        for o in 0..self.outputs {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let nw = self.inputs * self.outputs;
        let w = &params[self.offset..self.offset + nw];
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            let row = self.offset + o * self.inputs;
            for i in 0..self.inputs {
                grads[row + i] += g * x[i];
                dx[i] += g * w[o * self.inputs + i];
            }
            grads[self.offset + nw + o] += g;
        }
        dx
    }
}

/// D-dimensional transposed convolution, kernel 4, stride 2, padding 1, so
/// every axis doubles. Weights stored `[c_in][c_out][tap]` with taps
/// row-major over the kernel axes, then `c_out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deconv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dims: usize,
    pub offset: usize,
}

impl Deconv {
    pub fn taps(&self) -> usize {
        DECONV_KERNEL.pow(self.dims as u32)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.taps() + self.out_channels
    }

    fn tap_offsets(&self) -> Vec<[usize; MAX_DIMS]> {
        let k = Shape::new(&vec![DECONV_KERNEL; self.dims]).expect("kernel shape");
        k.cells().collect()
    }

    /// Pairs of (input cell, tap, output cell) touched by the kernel. The
    /// order is fixed, which makes accumulation deterministic.
    fn connections(&self, input: &Shape, output: &Shape) -> Vec<(u32, u32, u32)> {
        let taps = self.tap_offsets();
        let mut conns = Vec::with_capacity(input.len() * taps.len());
        let ores = output.res();
        for (i_flat, idx) in input.cells().enumerate() {
            'tap: for (t, k) in taps.iter().enumerate() {
                let mut o = [0usize; MAX_DIMS];
                for a in 0..self.dims {
                    let p = (idx[a] * DECONV_STRIDE + k[a]) as isize - DECONV_PAD as isize;
                    if p < 0 || p as usize >= ores[a] {
                        continue 'tap;
                    }
                    o[a] = p as usize;
                }
                conns.push((i_flat as u32, t as u32, output.flat(&o[..self.dims]) as u32));
            }
        }
        conns
    }

    fn forward(&self, params: &[f64], conns: &[(u32, u32, u32)], x: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
        let taps = self.taps();
        let nw = self.in_channels * self.out_channels * taps;
        let w = &params[self.offset..self.offset + nw];
        let b = &params[self.offset + nw..self.offset + nw + self.out_channels];
        let mut out = vec![0.0; self.out_channels * n_out];
        for co in 0..self.out_channels {
            out[co * n_out..(co + 1) * n_out].fill(b[co]);
        }
        for ci in 0..self.in_channels {
            let xin = &x[ci * n_in..(ci + 1) * n_in];
            for &(i, t, o) in conns {
                let v = xin[i as usize];
                if v == 0.0 {
                    continue;
                }
                for co in 0..self.out_channels {
                    out[co * n_out + o as usize] += v * w[(ci * self.out_channels + co) * taps + t as usize];
                }
            }
        }
        out
    }

    fn backward(
        &self,
        params: &[f64],
        conns: &[(u32, u32, u32)],
        x: &[f64],
        dy: &[f64],
        n_in: usize,
        n_out: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let taps = self.taps();
        let nw = self.in_channels * self.out_channels * taps;
        let w = &params[self.offset..self.offset + nw];
        let mut dx = vec![0.0; self.in_channels * n_in];
        for co in 0..self.out_channels {
            grads[self.offset + nw + co] += dy[co * n_out..(co + 1) * n_out].iter().sum::<f64>();
        }
        for ci in 0..self.in_channels {
            for &(i, t, o) in conns {
                let xi = x[ci * n_in + i as usize];
                let mut acc = 0.0;
                for co in 0..self.out_channels {
                    let widx = (ci * self.out_channels + co) * taps + t as usize;
                    let g = dy[co * n_out + o as usize];
                    acc += w[widx] * g;
                    grads[self.offset + widx] += xi * g;
                }
                dx[ci * n_in + i as usize] += acc;
            }
        }
        dx
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(grad: &mut [f64], pre: &[f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, params: &mut [f64], fan_in: usize, fan_out: usize, scale: f64) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
    for p in params {
        *p = rng.gen_range(-limit..limit);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamNetConfig {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl ParamNetConfig {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        ParamNetConfig {
            inputs,
            hidden: 32,
            outputs,
        }
    }
}

/// `alpha -> beta`: dense, ReLU, dense (linear output).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamNet {
    config: ParamNetConfig,
    layers: [Dense; 2],
    params: Vec<f64>,
    revision: u64,
}

#[derive(Clone, Debug)]
pub struct ParamCache {
    revision: u64,
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl ParamNet {
    pub fn zeros(config: ParamNetConfig) -> Result<Self> {
        if config.inputs == 0 || config.hidden == 0 || config.outputs == 0 {
            return Err(Error::InvalidArgument(format!("invalid parameter network {config:?}")));
        }
        let l0 = Dense {
            inputs: config.inputs,
            outputs: config.hidden,
            offset: 0,
        };
        let l1 = Dense {
            inputs: config.hidden,
            outputs: config.outputs,
            offset: l0.param_count(),
        };
        let n = l0.param_count() + l1.param_count();
        Ok(ParamNet {
            config,
            layers: [l0, l1],
            params: vec![0.0; n],
            revision: 0,
        })
    }

    pub fn new(config: ParamNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.layers {
            let nw = l.inputs * l.outputs;
            xavier(&mut rng, &mut net.params[l.offset..l.offset + nw], l.inputs, l.outputs, 1.0);
        }
        Ok(net)
    }

    pub fn config(&self) -> &ParamNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        self.revision += 1;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, alpha: &[f64]) -> Result<(WeightVector, ParamCache)> {
        if alpha.len() != self.config.inputs {
            return Err(Error::LengthMismatch {
                expected: self.config.inputs,
                got: alpha.len(),
            });
        }
        let mut pre = Vec::new();
        self.layers[0].forward(&self.params, alpha, &mut pre);
        let mut hidden = pre.clone();
        relu_in_place(&mut hidden);
        let mut out = Vec::new();
        self.layers[1].forward(&self.params, &hidden, &mut out);
        Ok((
            WeightVector(out),
            ParamCache {
                revision: self.revision,
                input: alpha.to_vec(),
                hidden_pre: pre,
                hidden,
            },
        ))
    }

    /// Gradient of the loss with respect to all parameters, given `dL/dbeta`.
    pub fn backward(&self, cache: &ParamCache, dl_dbeta: &[f64]) -> Result<Vec<f64>> {
        if cache.revision != self.revision || cache.input.len() != self.config.inputs {
            return Err(Error::StaleCache);
        }
        if dl_dbeta.len() != self.config.outputs {
            return Err(Error::LengthMismatch {
                expected: self.config.outputs,
                got: dl_dbeta.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut dh = self.layers[1].backward(&self.params, &cache.hidden, dl_dbeta, &mut grads);
        relu_mask(&mut dh, &cache.hidden_pre);
        self.layers[0].backward(&self.params, &cache.input, &dh, &mut grads);
        Ok(grads)
    }

    pub fn step(&mut self, adam: &mut AdamState, grads: &[f64], weight_decay: f64) -> Result<()> {
        adam.step(&mut self.params, grads, weight_decay)?;
        self.revision += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefoNetConfig {
    pub inputs: usize,
    pub dims: usize,
    /// Output resolution of the refinement field.
    pub defo_res: Vec<usize>,
    /// World-unit cell width of the output grid.
    pub spacing: f64,
    pub hidden: usize,
    pub seed_channels: usize,
    pub deconv_layers: usize,
    /// Fixed multiplier applied to the last layer's output.
    pub gain: f64,
}

impl DefoNetConfig {
    pub fn new(inputs: usize, defo_res: &[usize], spacing: f64) -> Self {
        DefoNetConfig {
            inputs,
            dims: defo_res.len(),
            defo_res: defo_res.to_vec(),
            spacing,
            hidden: 32,
            seed_channels: 8,
            deconv_layers: 2,
            gain: 1.0,
        }
    }

    pub fn seed_res(&self) -> Result<Vec<usize>> {
        let f = DECONV_STRIDE.pow(self.deconv_layers as u32);
        if self.defo_res.iter().any(|&r| r % f != 0 || r < f) {
            return Err(Error::InvalidArgument(format!(
                "defo resolution {:?} is not divisible by 2^{}",
                self.defo_res, self.deconv_layers
            )));
        }
        Ok(self.defo_res.iter().map(|r| r / f).collect())
    }

    /// Channel count entering each transposed convolution, plus the final D.
    pub fn channels(&self) -> Vec<usize> {
        let mut ch = vec![self.seed_channels];
        for l in 1..self.deconv_layers {
            ch.push((self.seed_channels >> l).max(1));
        }
        ch.push(self.dims);
        ch
    }
}

/// `alpha -> w`: two dense layers into a seed volume, then transposed
/// convolutions doubling the resolution. ReLU everywhere except the final
/// layer, which is linear so displacements can take either sign.
#[derive(Clone, Debug, PartialEq)]
pub struct DefoNet {
    config: DefoNetConfig,
    dense: [Dense; 2],
    deconvs: Vec<Deconv>,
    /// Shapes of the volumes entering each deconv, then the output shape.
    volumes: Vec<Shape>,
    conns: Vec<Vec<(u32, u32, u32)>>,
    params: Vec<f64>,
    revision: u64,
}

#[derive(Clone, Debug)]
pub struct DefoCache {
    revision: u64,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl DefoNet {
    pub fn zeros(config: DefoNetConfig) -> Result<Self> {
        if config.dims != config.defo_res.len() || config.deconv_layers == 0 || config.inputs == 0 {
            return Err(Error::InvalidArgument(format!("invalid deformation network {config:?}")));
        }
        if !(config.gain.is_finite() && config.spacing > 0.0) {
            return Err(Error::InvalidArgument("gain and spacing must be finite and positive".into()));
        }
        let seed = Shape::new(&config.seed_res()?)?;
        let channels = config.channels();
        let d0 = Dense {
            inputs: config.inputs,
            outputs: config.hidden,
            offset: 0,
        };
        let d1 = Dense {
            inputs: config.hidden,
            outputs: channels[0] * seed.len(),
            offset: d0.param_count(),
        };
        let mut offset = d0.param_count() + d1.param_count();
        let mut volumes = vec![seed];
        let mut deconvs = Vec::new();
        let mut conns = Vec::new();
        for l in 0..config.deconv_layers {
            let dc = Deconv {
                in_channels: channels[l],
                out_channels: channels[l + 1],
                dims: config.dims,
                offset,
            };
            offset += dc.param_count();
            let next = volumes[l].scaled(&vec![DECONV_STRIDE; config.dims])?;
            conns.push(dc.connections(&volumes[l], &next));
            volumes.push(next);
            deconvs.push(dc);
        }
        Ok(DefoNet {
            config,
            dense: [d0, d1],
            deconvs,
            volumes,
            conns,
            params: vec![0.0; offset],
            revision: 0,
        })
    }

    pub fn new(config: DefoNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.dense {
            let nw = l.inputs * l.outputs;
            xavier(&mut rng, &mut net.params[l.offset..l.offset + nw], l.inputs, l.outputs, 1.0);
        }
        let last = net.deconvs.len() - 1;
        for (i, dc) in net.deconvs.clone().iter().enumerate() {
            let nw = dc.in_channels * dc.out_channels * dc.taps();
            let scale = if i == last { 0.01 } else { 1.0 };
            xavier(
                &mut rng,
                &mut net.params[dc.offset..dc.offset + nw],
                dc.in_channels * dc.taps(),
                dc.out_channels * dc.taps(),
                scale,
            );
        }
        Ok(net)
    }

    pub fn config(&self) -> &DefoNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        self.revision += 1;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_shape(&self) -> Shape {
        *self.volumes.last().expect("output volume")
    }

    /// Offset and length of the last layer's weights inside the flat
    /// parameter vector.
    pub fn final_layer_range(&self) -> std::ops::Range<usize> {
        let dc = self.deconvs.last().expect("deconv");
        dc.offset..dc.offset + dc.param_count()
    }

    pub fn forward(&self, alpha: &[f64]) -> Result<(VectorField, DefoCache)> {
        if alpha.len() != self.config.inputs {
            return Err(Error::LengthMismatch {
                expected: self.config.inputs,
                got: alpha.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.deconvs.len() + 2);
        let mut act = Vec::with_capacity(self.deconvs.len() + 2);
        let mut x = alpha.to_vec();
        for l in &self.dense {
            let mut y = Vec::new();
            l.forward(&self.params, &x, &mut y);
            pre.push(y.clone());
            relu_in_place(&mut y);
            act.push(y.clone());
            x = y;
        }
        let last = self.deconvs.len() - 1;
        for (l, dc) in self.deconvs.iter().enumerate() {
            let n_in = self.volumes[l].len();
            let n_out = self.volumes[l + 1].len();
            let mut y = dc.forward(&self.params, &self.conns[l], &x, n_in, n_out);
            if l < last {
                pre.push(y.clone());
                relu_in_place(&mut y);
                act.push(y.clone());
            }
            x = y;
        }
        let shape = self.output_shape();
        let d = self.config.dims;
        let n = shape.len();
        let mut data = vec![0.0; n * d];
        for c in 0..d {
            for cell in 0..n {
                data[cell * d + c] = self.config.gain * x[c * n + cell];
            }
        }
        let w = VectorField::new(shape, self.config.spacing, data)?;
        Ok((
            w,
            DefoCache {
                revision: self.revision,
                input: alpha.to_vec(),
                pre,
                act,
            },
        ))
    }

    /// Gradient with respect to all parameters from per-vector output
    /// gradients `dL/dw_j`.
    pub fn backward(&self, cache: &DefoCache, dl_dw: &VectorField) -> Result<Vec<f64>> {
        if cache.revision != self.revision || cache.input.len() != self.config.inputs {
            return Err(Error::StaleCache);
        }
        crate::grid::same_shape(&self.output_shape(), &dl_dw.shape())?;
        let d = self.config.dims;
        let n = dl_dw.shape().len();
        let mut dy = vec![0.0; n * d];
        for cell in 0..n {
            for c in 0..d {
                dy[c * n + cell] = self.config.gain * dl_dw.values()[cell * d + c];
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let last = self.deconvs.len() - 1;
        for l in (0..self.deconvs.len()).rev() {
            let dc = &self.deconvs[l];
            if l < last {
                relu_mask(&mut dy, &cache.pre[l + 2]);
            }
            let x = &cache.act[l + 1];
            dy = dc.backward(
                &self.params,
                &self.conns[l],
                x,
                &dy,
                self.volumes[l].len(),
                self.volumes[l + 1].len(),
                &mut grads,
            );
        }
        relu_mask(&mut dy, &cache.pre[1]);
        dy = self.dense[1].backward(&self.params, &cache.act[0], &dy, &mut grads);
        relu_mask(&mut dy, &cache.pre[0]);
        self.dense[0].backward(&self.params, &cache.input, &dy, &mut grads);
        Ok(grads)
    }

    pub fn step(&mut self, adam: &mut AdamState, grads: &[f64], weight_decay: f64) -> Result<()> {
        adam.step(&mut self.params, grads, weight_decay)?;
        self.revision += 1;
        Ok(())
    }
}

/// ADAM optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One ADAM update. `weight_decay * theta` is added to the gradient first.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Standalone form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, weight_decay: f64) -> Result<()> {
    state.step(params, grads, weight_decay)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
