use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Binary message of length `n >= 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitMessage(Vec<bool>);

impl BitMessage {
    /// Builds a message from `0`/`1` entries.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(invalid(format!("bit value {bad} is not 0 or 1")));
        }
        Self::from_bools(bits.into_iter().map(|b| b == 1).collect())
    }

    pub fn from_bools(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("message length must be at least 1"));
        }
        Ok(Self(bits))
    }

    /// Uniformly random message.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        Self::from_bools((0..n).map(|_| rng.random::<bool>()).collect())
    }

    /// Hard decisions on soft outputs: bit is 1 iff `soft >= 0.5`.
    pub fn from_soft(soft: &[f64]) -> Result<Self> {
        Self::from_bools(soft.iter().map(|&p| p >= 0.5).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }

    pub fn with_flipped(&self, i: usize) -> Self {
        let mut bits = self.0.clone();
        bits[i] = !bits[i];
        Self(bits)
    }

    /// Number of positions where the messages differ.
    pub fn hamming(&self, other: &Self) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                context: "message length",
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }

    /// `ceil(n / 8)` bytes, bit `i` stored at bit `i % 8` of byte `i / 8`.
    pub fn pack_lsb_first(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_lsb_first(bytes: &[u8], n: usize) -> Result<Self> {
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::DimensionMismatch {
                context: "packed message bytes",
                expected: n.div_ceil(8),
                actual: bytes.len(),
            });
        }
        Self::from_bools((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    }
}

impl TryFrom<Vec<u8>> for BitMessage {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BitMessage> for Vec<u8> {
    fn from(m: BitMessage) -> Self {
        m.0.into_iter().map(u8::from).collect()
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
