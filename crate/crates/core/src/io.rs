//! Binary containers.
//!
//! DSDF holds one scalar or vector field plus the parameter point it belongs
//! to. DNET holds a JSON descriptor followed by named f32 blobs. Both are
//! little-endian throughout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarField, Shape, VectorField};

pub const DSDF_MAGIC: [u8; 4] = *b"DSDF";
pub const DSDF_VERSION: u32 = 1;
pub const DNET_MAGIC: [u8; 4] = *b"DNET";
pub const DNET_VERSION: u32 = 1;

const KIND_SCALAR: u32 = 0;
const KIND_VECTOR: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl Field {
    pub fn shape(&self) -> Shape {
        match self {
            Field::Scalar(f) => f.shape(),
            Field::Vector(v) => v.shape(),
        }
    }

    pub fn spacing(&self) -> f64 {
        match self {
            Field::Scalar(f) => f.spacing(),
            Field::Vector(v) => v.spacing(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsdfFile {
    pub alpha: Vec<f64>,
    pub field: Field,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::BadMagic {
                expected,
                found: [m[0], m[1], m[2], m[3]],
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != supported {
            return Err(Error::UnsupportedVersion { found: v, supported });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_dsdf(field: &Field, alpha: &[f64]) -> Vec<u8> {
    let shape = field.shape();
    let (kind, data) = match field {
        Field::Scalar(f) => (KIND_SCALAR, f.values()),
        Field::Vector(v) => (KIND_VECTOR, v.values()),
    };
    let mut out = Vec::with_capacity(32 + 4 * (shape.dims() + alpha.len() + data.len()));
    out.extend_from_slice(&DSDF_MAGIC);
    put_u32(&mut out, DSDF_VERSION);
    put_u32(&mut out, kind);
    put_u32(&mut out, shape.dims() as u32);
    for &r in shape.res() {
        put_u32(&mut out, r as u32);
    }
    put_f32(&mut out, field.spacing());
    put_u32(&mut out, alpha.len() as u32);
    for &a in alpha {
        put_f32(&mut out, a);
    }
    for &v in data {
        put_f32(&mut out, v);
    }
    out
}

pub fn decode_dsdf(bytes: &[u8]) -> Result<DsdfFile> {
    let mut r = Reader::new(bytes);
    r.magic(DSDF_MAGIC)?;
    r.version(DSDF_VERSION)?;
    let kind = r.u32("kind")?;
    let dims = r.u32("dims")? as usize;
    if !(2..=crate::grid::MAX_DIMS).contains(&dims) {
        return Err(Error::Corrupt(format!("unsupported dimension {dims}")));
    }
    let mut res = Vec::with_capacity(dims);
    for _ in 0..dims {
        res.push(r.u32("resolution")? as usize);
    }
    let shape = Shape::new(&res).map_err(|e| Error::Corrupt(e.to_string()))?;
    let spacing = r.f32("spacing")? as f64;
    let n_params = r.u32("parameter count")? as usize;
    let alpha: Vec<f64> = r.f32s(n_params, "parameters")?.into_iter().map(f64::from).collect();
    let per_cell = match kind {
        KIND_SCALAR => 1,
        KIND_VECTOR => dims,
        k => return Err(Error::Corrupt(format!("unknown field kind {k}"))),
    };
    let data: Vec<f64> = r
        .f32s(shape.len() * per_cell, "field data")?
        .into_iter()
        .map(f64::from)
        .collect();
    r.finish()?;
    let field = if kind == KIND_SCALAR {
        Field::Scalar(ScalarField::new(shape, spacing, data).map_err(|e| Error::Corrupt(e.to_string()))?)
    } else {
        Field::Vector(VectorField::new(shape, spacing, data).map_err(|e| Error::Corrupt(e.to_string()))?)
    };
    Ok(DsdfFile { alpha, field })
}

pub fn write_dsdf(path: &Path, field: &Field, alpha: &[f64]) -> Result<()> {
    fs::write(path, encode_dsdf(field, alpha))?;
    Ok(())
}

pub fn read_dsdf(path: &Path) -> Result<DsdfFile> {
    decode_dsdf(&fs::read(path)?)
}

pub fn read_scalar(path: &Path) -> Result<(ScalarField, Vec<f64>)> {
    match read_dsdf(path)? {
        DsdfFile {
            field: Field::Scalar(f),
            alpha,
        } => Ok((f, alpha)),
        _ => Err(Error::Corrupt(format!("{} holds a vector field", path.display()))),
    }
}

pub fn read_vector(path: &Path) -> Result<(VectorField, Vec<f64>)> {
    match read_dsdf(path)? {
        DsdfFile {
            field: Field::Vector(v),
            alpha,
        } => Ok((v, alpha)),
        _ => Err(Error::Corrupt(format!("{} holds a scalar field", path.display()))),
    }
}

/// Rounds a field through f32 exactly as a DSDF round trip would.
pub fn quantize_scalar(f: &ScalarField) -> ScalarField {
    ScalarField::new(f.shape(), f.spacing() as f32 as f64, f.values().iter().map(|&v| v as f32 as f64).collect())
        .expect("quantized field")
}

pub fn quantize_vector(v: &VectorField) -> VectorField {
    VectorField::new(v.shape(), v.spacing() as f32 as f64, v.values().iter().map(|&x| x as f32 as f64).collect())
        .expect("quantized field")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub len: usize,
}

/// A decoded DNET file: the descriptor with its blob list removed, and the
/// blobs in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct DnetFile {
    pub descriptor: serde_json::Value,
    pub blobs: Vec<(String, Vec<f32>)>,
}

impl DnetFile {
    pub fn blob(&self, name: &str) -> Result<&[f32]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("missing blob {name:?}")))
    }
}

pub fn encode_dnet(descriptor: &serde_json::Value, blobs: &[(String, Vec<f32>)]) -> Result<Vec<u8>> {
    let mut desc = descriptor.clone();
    let obj = desc
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("descriptor must be a JSON object".into()))?;
    let infos: Vec<BlobInfo> = blobs
        .iter()
        .map(|(name, b)| BlobInfo {
            name: name.clone(),
            len: b.len(),
        })
        .collect();
    obj.insert("blobs".into(), serde_json::to_value(infos)?);
    let json = serde_json::to_vec(&desc)?;
    let mut out = Vec::new();
    out.extend_from_slice(&DNET_MAGIC);
    put_u32(&mut out, DNET_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for (_, b) in blobs {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dnet(bytes: &[u8]) -> Result<DnetFile> {
    let mut r = Reader::new(bytes);
    r.magic(DNET_MAGIC)?;
    r.version(DNET_VERSION)?;
    let n = r.u32("descriptor length")? as usize;
    let json = r.take(n, "descriptor")?;
    let mut descriptor: serde_json::Value = serde_json::from_slice(json)?;
    let infos: Vec<BlobInfo> = match descriptor.as_object_mut().and_then(|o| o.remove("blobs")) {
        Some(v) => serde_json::from_value(v)?,
        None => return Err(Error::Corrupt("descriptor has no blob list".into())),
    };
    let mut blobs = Vec::with_capacity(infos.len());
    for info in infos {
        let data = r.f32s(info.len, &format!("blob {:?}", info.name))?;
        blobs.push((info.name, data));
    }
    r.finish()?;
    Ok(DnetFile { descriptor, blobs })
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
