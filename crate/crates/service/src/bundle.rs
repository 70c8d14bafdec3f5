//! Trained model packaging in the DNET container.

use std::path::Path;

use deformnet_core::align::{region_factor, AlignedSequence};
use deformnet_core::data::AxisInfo;
use deformnet_core::io::{decode_dnet, encode_dnet, to_f32, to_f64};
use deformnet_core::neural::{DefoNet, DefoNetConfig, ParamNet, ParamNetConfig};
use deformnet_core::train::{AblationReport, Model};
use deformnet_core::{Error, Result, ScalarField, Shape, VectorField};
use serde::{Deserialize, Serialize};
use serde_json::json;

const KIND: &str = "deformnet-model";

/// A ground-truth field stored alongside the model so clients can compare
/// predictions against it.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub alpha: Vec<f64>,
    pub phi: ScalarField,
}

/// Immutable trained system: initial SDF, aligned deformations, both
/// networks, and the settings they were trained with.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model,
    pub axes: Vec<AxisInfo>,
    pub sigma: f64,
    pub region_factor: usize,
    pub ablation: Option<AblationReport>,
    pub references: Vec<Reference>,
}

#[derive(Serialize, Deserialize)]
struct RefEntry {
    alpha: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    dims: usize,
    sdf_res: Vec<usize>,
    spacing: f64,
    sigma: f64,
    fill_iters: usize,
    region_factor: usize,
    axes: Vec<AxisInfo>,
    axis_of: Vec<usize>,
    param_net: ParamNetConfig,
    defo_net: Option<DefoNetConfig>,
    layers: serde_json::Value,
    ablation: Option<AblationReport>,
    references: Vec<RefEntry>,
}

fn layer_list(p: &ParamNetConfig, d: Option<&DefoNetConfig>) -> Result<serde_json::Value> {
    let param = vec![
        json!({"type": "dense", "in": p.inputs, "out": p.hidden}),
        json!({"type": "relu"}),
        json!({"type": "dense", "in": p.hidden, "out": p.outputs}),
    ];
    let defo = match d {
        None => serde_json::Value::Null,
        Some(d) => {
            let seed = d.seed_res()?;
            let cells: usize = seed.iter().product();
            let ch = d.channels();
            let mut l = vec![
                json!({"type": "dense", "in": d.inputs, "out": d.hidden}),
                json!({"type": "relu"}),
                json!({"type": "dense", "in": d.hidden, "out": cells * d.seed_channels}),
                json!({"type": "relu"}),
                json!({"type": "reshape", "res": seed, "channels": d.seed_channels}),
            ];
            let mut res = seed;
            for k in 0..d.deconv_layers {
                res = res.iter().map(|r| r * 2).collect();
                l.push(json!({"type": "deconv", "in": ch[k], "out": ch[k + 1], "kernel": 4, "stride": 2, "pad": 1, "res": res}));
                if k + 1 < d.deconv_layers {
                    l.push(json!({"type": "relu"}));
                }
            }
            l.push(json!({"type": "scale", "gain": d.gain}));
            serde_json::Value::Array(l)
        }
    };
    Ok(json!({"param_net": param, "defo_net": defo}))
}

impl ModelBundle {
    pub fn dims(&self) -> usize {
        self.model.psi0.dims()
    }

    pub fn sdf_res(&self) -> &[usize] {
        self.model.psi0.res()
    }

    /// Refinement grid resolution; the SDF grid coarsened by the region factor
    /// when no refinement network is present.
    pub fn defo_res(&self) -> Vec<usize> {
        match &self.model.dnet {
            Some(d) => d.config().defo_res.clone(),
            None => self.sdf_res().iter().map(|r| r / self.region_factor.max(1)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.axes.len()
    }

    pub fn reference(&self, alpha: &[f64]) -> Option<&Reference> {
        self.references
            .iter()
            .find(|r| r.alpha.len() == alpha.len() && r.alpha.iter().zip(alpha).all(|(a, b)| (a - b).abs() < 1e-9))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let n = self.axes.len();
        let shape = m.psi0.shape();
        if m.seq.shape() != shape {
            return Err(Error::ResMismatch {
                left: m.seq.shape().res().to_vec(),
                right: shape.res().to_vec(),
            });
        }
        let pc = m.pnet.config();
        if pc.inputs != n {
            return Err(Error::LengthMismatch { expected: n, got: pc.inputs });
        }
        if pc.outputs != m.seq.len() {
            return Err(Error::LengthMismatch {
                expected: m.seq.len(),
                got: pc.outputs,
            });
        }
        if let Some(d) = &m.dnet {
            let dc = d.config();
            if dc.inputs != n {
                return Err(Error::LengthMismatch { expected: n, got: dc.inputs });
            }
            let f = region_factor(shape.res(), &dc.defo_res)?;
            if f != self.region_factor {
                return Err(Error::InvalidArgument(format!(
                    "refinement grid implies region factor {f}, bundle says {}",
                    self.region_factor
                )));
            }
        }
        for r in &self.references {
            if r.alpha.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: r.alpha.len(),
                });
            }
            r.phi.same_layout(&m.psi0)?;
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let m = &self.model;
        let desc = Descriptor {
            kind: KIND.into(),
            dims: self.dims(),
            sdf_res: self.sdf_res().to_vec(),
            spacing: m.psi0.spacing(),
            sigma: self.sigma,
            fill_iters: m.fill_iters,
            region_factor: self.region_factor,
            axes: self.axes.clone(),
            axis_of: m.seq.axis_of().to_vec(),
            param_net: *m.pnet.config(),
            defo_net: m.dnet.as_ref().map(|d| d.config().clone()),
            layers: layer_list(m.pnet.config(), m.dnet.as_ref().map(|d| d.config()))?,
            ablation: self.ablation.clone(),
            references: self.references.iter().map(|r| RefEntry { alpha: r.alpha.clone() }).collect(),
        };
        let mut blobs = vec![("psi0".to_string(), to_f32(m.psi0.values()))];
        for (i, u) in m.seq.fields().iter().enumerate() {
            blobs.push((format!("u_star_{i}"), to_f32(u.values())));
        }
        blobs.push(("param_net".into(), to_f32(m.pnet.params())));
        if let Some(d) = &m.dnet {
            blobs.push(("defo_net".into(), to_f32(d.params())));
        }
        for (i, r) in self.references.iter().enumerate() {
            blobs.push((format!("reference_{i}"), to_f32(r.phi.values())));
        }
        encode_dnet(&serde_json::to_value(desc)?, &blobs)
    }

    pub fn decode(bytes: &[u8]) -> Result<ModelBundle> {
        let file = decode_dnet(bytes)?;
        let desc: Descriptor = serde_json::from_value(file.descriptor.clone())?;
        if desc.kind != KIND {
            return Err(Error::Corrupt(format!("unexpected model kind {:?}", desc.kind)));
        }
        if desc.sdf_res.len() != desc.dims {
            return Err(Error::DimsMismatch {
                expected: desc.dims,
                got: desc.sdf_res.len(),
            });
        }
        let shape = Shape::new(&desc.sdf_res)?;
        let psi0 = ScalarField::new(shape, desc.spacing, to_f64(file.blob("psi0")?))?;
        let fields = (0..desc.axis_of.len())
            .map(|i| VectorField::new(shape, desc.spacing, to_f64(file.blob(&format!("u_star_{i}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let seq = AlignedSequence::new(fields, desc.axis_of)?;
        let mut pnet = ParamNet::zeros(desc.param_net)?;
        pnet.set_params(to_f64(file.blob("param_net")?))?;
        let dnet = match desc.defo_net {
            Some(cfg) => {
                let mut d = DefoNet::zeros(cfg)?;
                d.set_params(to_f64(file.blob("defo_net")?))?;
                Some(d)
            }
            None => None,
        };
        let references = desc
            .references
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(Reference {
                    alpha: r.alpha,
                    phi: ScalarField::new(shape, desc.spacing, to_f64(file.blob(&format!("reference_{i}"))?))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = ModelBundle {
            model: Model {
                psi0,
                seq,
                pnet,
                dnet,
                fill_iters: desc.fill_iters,
            },
            axes: desc.axes,
            sigma: desc.sigma,
            region_factor: desc.region_factor,
            ablation: desc.ablation,
            references,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        ModelBundle::decode(&std::fs::read(path)?)
    }

    /// Rounds every stored quantity to f32 so the in-memory bundle matches
    /// what a save/load round trip would produce.
    pub fn quantized(&self) -> Result<ModelBundle> {
        ModelBundle::decode(&self.encode()?)
    }
}
