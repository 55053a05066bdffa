//! Model checkpoints.
//!
//! ```text
//! "GLCK" | u32 version | u32 num_layers
//! per layer:   u32 out | u32 in | u8 activation (0 none, 1 relu) | out·in f64 | out f64
//! classifier:  u32 L | u32 F | L·F f64 | L f64 | u8 has_scale | [L f64]
//! ```
//!
//! Everything little-endian; parameters are stored as `f64`, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use super::{Activation, Classifier, DenseLayer, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(m: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, m.layers.len() as u32);
    for layer in &m.layers {
        put_u32(&mut out, layer.fan_out() as u32);
        put_u32(&mut out, layer.fan_in() as u32);
        out.push(match layer.activation {
            Activation::None => 0,
            Activation::Relu => 1,
        });
        put_f64s(&mut out, layer.weight.as_slice());
        put_f64s(&mut out, &layer.bias);
    }
    let c = &m.classifier;
    put_u32(&mut out, c.num_classes() as u32);
    put_u32(&mut out, c.feature_dim() as u32);
    put_f64s(&mut out, c.weight.as_slice());
    put_f64s(&mut out, &c.bias);
    match &c.scale {
        Some(s) => {
            out.push(1);
            put_f64s(&mut out, s);
        }
        None => out.push(0),
    }
    out
}

/// Writes to a temporary sibling first and renames, so a failed save leaves no partial file.
pub fn save_checkpoint(m: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(m)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad checkpoint magic, expected \"GLCK\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
    }
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let rows = r.u32("layer rows")? as usize;
        let cols = r.u32("layer cols")? as usize;
        let at = r.pos;
        let activation = match r.take(1, "activation")?[0] {
            0 => Activation::None,
            1 => Activation::Relu,
            t => return Err(Error::parse(at as u64, format!("unknown activation tag {t}"))),
        };
        let weight = r.matrix(rows, cols)?;
        let bias = r.f64s(rows, "layer bias")?;
        layers.push(DenseLayer {
            weight,
            bias,
            activation,
        });
    }
    let rows = r.u32("classifier rows")? as usize;
    let cols = r.u32("classifier cols")? as usize;
    let weight = r.matrix(rows, cols)?;
    let bias = r.f64s(rows, "classifier bias")?;
    let at = r.pos;
    let scale = match r.take(1, "scale flag")?[0] {
        0 => None,
        1 => Some(r.f64s(rows, "scale factors")?),
        t => return Err(Error::parse(at as u64, format!("bad scale flag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after checkpoint"));
    }
    let m = ModelParams {
        layers,
        classifier: Classifier {
            weight,
            bias,
            scale,
        },
    };
    m.validate()
        .map_err(|e| Error::parse(bytes.len() as u64, format!("inconsistent checkpoint: {e}")))?;
    Ok(m)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::parse(self.pos as u64, format!("{what} too large")))?;
        let at = self.pos;
        let raw = self.take(len, what)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(at as u64, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::parse(self.pos as u64, "matrix too large"))?;
        let data = self.f64s(n, "weight matrix")?;
        Matrix::from_vec(rows, cols, data)
    }
}
