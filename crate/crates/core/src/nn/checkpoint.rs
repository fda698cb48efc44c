//! Binary checkpoint format.
//!
//! ```text
//! "RMK1" | u16 version (=1) | u32 layer count
//! per layer: u32 rows | u32 cols | u8 activation | rows*cols f64 weights | rows f64 biases
//! u64 checksum = wrapping sum of every preceding byte
//! ```
//! All integers and reals are little-endian; weights are row-major.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::activation::Activation;
use super::matrix::Matrix;
use super::mlp::{Layer, MlpNetwork};
use crate::error::{format_err, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RMK1";
pub const VERSION: u16 = 1;

pub fn byte_checksum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn encode<T: Scalar>(net: &MlpNetwork<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        out.push(layer.activation.code());
        for &w in layer.weight.as_slice().iter().chain(&layer.bias) {
            out.extend_from_slice(&w.to_f64_lossy().to_le_bytes());
        }
    }
    let sum = byte_checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<MlpNetwork<T>> {
    if bytes.len() < 4 + 2 + 4 + 8 {
        return Err(format_err("checkpoint", "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != byte_checksum(body) {
        return Err(format_err("checkpoint", "checksum mismatch"));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(format_err("checkpoint", "bad magic"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(format_err(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let code = r.take(1)?[0];
        let activation = Activation::from_code(code)
            .ok_or_else(|| format_err("checkpoint", format!("activation code {code}")))?;
        let cells = rows
            .checked_mul(cols)
            .filter(|&c| c.saturating_add(rows).saturating_mul(8) <= body.len())
            .ok_or_else(|| format_err("checkpoint", "layer larger than file"))?;
        let weights = (0..cells)
            .map(|_| r.f64().map(T::from_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..rows)
            .map(|_| r.f64().map(T::from_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        layers.push(Layer::new(
            Matrix::from_vec(rows, cols, weights)?,
            bias,
            activation,
        )?);
    }
    if r.pos != body.len() {
        return Err(format_err("checkpoint", "trailing bytes before checksum"));
    }
    MlpNetwork::new(layers)
}

pub fn save<T: Scalar>(net: &MlpNetwork<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<MlpNetwork<T>> {
    decode(&fs::read(path)?)
}

/// SHA-256 of the checkpoint encoding, as lowercase hex.
pub fn fingerprint<T: Scalar>(net: &MlpNetwork<T>) -> String {
    hex::encode(Sha256::digest(encode(net)))
}
