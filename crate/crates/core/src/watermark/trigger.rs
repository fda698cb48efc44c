//! Trigger images and the `RMTS` trigger-set file.
//!
//! ```text
//! "RMTS" | u16 version (=1) | u32 N | u32 s | u32 n | u64 master seed
//! per sample: s f64 pixels | f64 sigma | ceil(n/8) bytes message (LSB-first)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::message::BitMessage;
use crate::error::{format_err, invalid, Error, Result};

pub const MAGIC: &[u8; 4] = b"RMTS";
pub const VERSION: u16 = 1;

/// One secret image, its per-image noise scale and its assigned message.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSample {
    image: Vec<f64>,
    message: BitMessage,
    sigma: f64,
}

impl TriggerSample {
    pub fn new(image: Vec<f64>, message: BitMessage, sigma: f64) -> Result<Self> {
        if image.is_empty() {
            return Err(invalid("trigger image is empty"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!(
                "trigger sigma must be positive, got {sigma}"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(invalid("trigger image has non-finite pixels"));
        }
        Ok(Self {
            image,
            message,
            sigma,
        })
    }

    pub fn image(&self) -> &[f64] {
        &self.image
    }

    pub fn message(&self) -> &BitMessage {
        &self.message
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `K` draws of `x + eps_j`, `eps_j ~ N(0, sigma^2 I)`, from one seeded stream.
    pub fn sample_noise(&self, k: usize, stream_seed: u64) -> Vec<Vec<f64>> {
        sample_noise(&self.image, self.sigma, k, stream_seed)
    }
}

pub fn sample_noise(image: &[f64], sigma: f64, k: usize, stream_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    (0..k)
        .map(|_| {
            image
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + sigma * z
                })
                .collect()
        })
        .collect()
}

/// The owner's secret trigger set.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    samples: Vec<TriggerSample>,
    n: usize,
    s: usize,
    master_seed: u64,
}

impl TriggerSet {
    pub fn new(samples: Vec<TriggerSample>, master_seed: u64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| invalid("trigger set is empty"))?;
        let (s, n) = (first.image.len(), first.message.len());
        for t in &samples {
            if t.image.len() != s {
                return Err(Error::DimensionMismatch {
                    context: "trigger image length",
                    expected: s,
                    actual: t.image.len(),
                });
            }
            if t.message.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "trigger message length",
                    expected: n,
                    actual: t.message.len(),
                });
            }
        }
        Ok(Self {
            samples,
            n,
            s,
            master_seed,
        })
    }

    pub fn samples(&self) -> &[TriggerSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn message_len(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.s as u32).to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        for t in &self.samples {
            for &p in &t.image {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&t.sigma.to_le_bytes());
            out.extend_from_slice(&t.message.pack_lsb_first());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 2 + 12 + 8;
        if bytes.len() < header {
            return Err(format_err("trigger set", "file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err("trigger set", "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4")) as usize;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format_err(
                "trigger set",
                format!("unsupported version {version}"),
            ));
        }
        let (count, s, n) = (u32_at(6), u32_at(10), u32_at(14));
        let master_seed = u64::from_le_bytes(bytes[18..26].try_into().expect("8"));
        let packed = n.div_ceil(8);
        let record = s * 8 + 8 + packed;
        if bytes.len() != header + count * record {
            return Err(format_err(
                "trigger set",
                format!(
                    "expected {} bytes, found {}",
                    header + count * record,
                    bytes.len()
                ),
            ));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8"));
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let base = header + i * record;
            let image = (0..s).map(|j| f64_at(base + 8 * j)).collect();
            let sigma = f64_at(base + 8 * s);
            let msg_off = base + 8 * s + 8;
            let message = BitMessage::unpack_lsb_first(&bytes[msg_off..msg_off + packed], n)?;
            samples.push(TriggerSample::new(image, message, sigma)?);
        }
        Self::new(samples, master_seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(image: Vec<f64>, bits: Vec<u8>, sigma: f64) -> TriggerSample {
        TriggerSample::new(image, BitMessage::new(bits).unwrap(), sigma).unwrap()
    }

    #[test]
    fn invalid_sigma_is_rejected() {
        let m = BitMessage::new(vec![1]).unwrap();
        assert!(TriggerSample::new(vec![0.5], m.clone(), 0.0).is_err());
        assert!(TriggerSample::new(vec![0.5], m, f64::NAN).is_err());
    }

    #[test]
    fn tiny_sigma_leaves_image_in_place() {
        let t = sample(vec![0.2, 0.4, 0.6], vec![1, 0], 1e-300);
        for draw in t.sample_noise(5, 1) {
            assert_eq!(draw, t.image().to_vec());
        }
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let t = sample(vec![0.1; 8], vec![1, 1, 0], 0.3);
        assert_eq!(t.sample_noise(4, 77), t.sample_noise(4, 77));
        assert_ne!(t.sample_noise(4, 77), t.sample_noise(4, 78));
    }

    #[test]
    fn noise_moments_match_sigma() {
        let x = vec![0.1, 0.5, 0.9, 0.3];
        let (k, sigma) = (10_000, 0.1);
        let t = sample(x.clone(), vec![0], sigma);
        let draws = t.sample_noise(k, 2024);
        for (c, &xc) in x.iter().enumerate() {
            let mean = draws.iter().map(|d| d[c]).sum::<f64>() / k as f64;
            let var = draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            assert!((mean - xc).abs() < 4.0 * sigma / (k as f64).sqrt());
            assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
        }
    }

    #[test]
    fn file_round_trip_and_layout() {
        let set = TriggerSet::new(
            vec![
                sample(vec![0.25, 0.75], vec![1, 0, 1, 1, 0, 0, 0, 0, 1], 0.01),
                sample(vec![1.0, 0.0], vec![0, 0, 0, 0, 0, 0, 0, 0, 0], 0.02),
            ],
            0xDEAD_BEEF,
        )
        .unwrap();
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..4], b"RMTS");
        assert_eq!(bytes.len(), 26 + 2 * (2 * 8 + 8 + 2));
        // first message packed LSB-first: bits 0,2,3 -> 0b1101, bit 8 -> 1
        assert_eq!(&bytes[26 + 24..26 + 26], &[0b0000_1101, 0b0000_0001]);
        assert_eq!(TriggerSet::from_bytes(&bytes).unwrap(), set);
        assert!(TriggerSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let a = sample(vec![0.0; 2], vec![1], 0.1);
        let b = sample(vec![0.0; 3], vec![1], 0.1);
        assert!(TriggerSet::new(vec![a, b], 0).is_err());
        assert!(TriggerSet::new(vec![], 0).is_err());
    }
}
