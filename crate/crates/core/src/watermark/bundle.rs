use rand::Rng;
use serde::{Deserialize, Serialize};

use super::message::BitMessage;
use crate::error::{Error, Result};
use crate::nn::{Activation, Matrix, MlpNetwork, MlpSpec, Trace};
use crate::scalar::Scalar;

/// Residual encoder `e(x, m) = x + scale * net([x, 2m - 1])`.
///
/// The wrapped network maps `s + n -> s` and must end in `tanh`, so the
/// stego image stays within `scale` of the noisy trigger in every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub net: MlpNetwork<T>,
    pub scale: T,
}

/// Decoder `d: R^k -> (0,1)^n`, a network ending in `sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub net: MlpNetwork<T>,
}

/// Result of [`Encoder::encode_batch`] kept for back-propagation.
pub struct EncodedBatch<T> {
    pub stego: Matrix<T>,
    pub trace: Trace<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(net: MlpNetwork<T>, scale: T) -> Result<Self> {
        let last = net.layers().last().expect("non-empty").activation;
        if last != Activation::Tanh {
            return Err(Error::InvalidArgument(format!(
                "encoder output activation must be tanh, got {last:?}"
            )));
        }
        if net.output_dim() >= net.input_dim() {
            return Err(Error::InvalidArgument(
                "encoder must map s + n inputs to s outputs".into(),
            ));
        }
        Ok(Self { net, scale })
    }

    pub fn image_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn message_len(&self) -> usize {
        self.net.input_dim() - self.net.output_dim()
    }

    fn input_rows(&self, noisy: &Matrix<T>, messages: &[&BitMessage]) -> Result<Matrix<T>> {
        let s = self.image_dim();
        if noisy.cols() != s {
            return Err(Error::DimensionMismatch {
                context: "encoder image",
                expected: s,
                actual: noisy.cols(),
            });
        }
        if messages.len() != noisy.rows() {
            return Err(Error::DimensionMismatch {
                context: "encoder messages per row",
                expected: noisy.rows(),
                actual: messages.len(),
            });
        }
        let mut input = Matrix::zeros(noisy.rows(), self.net.input_dim());
        for (r, message) in messages.iter().enumerate() {
            if message.len() != self.message_len() {
                return Err(Error::DimensionMismatch {
                    context: "encoder message",
                    expected: self.message_len(),
                    actual: message.len(),
                });
            }
            let row = input.row_mut(r);
            row[..s].copy_from_slice(noisy.row(r));
            for (v, &b) in row[s..].iter_mut().zip(message.bits()) {
                *v = if b { T::one() } else { -T::one() };
            }
        }
        Ok(input)
    }

    /// Encodes a batch of noisy copies of one trigger.
    pub fn encode_batch(&self, noisy: &Matrix<T>, message: &BitMessage) -> Result<EncodedBatch<T>> {
        let messages = vec![message; noisy.rows()];
        self.encode_rows(noisy, &messages)
    }

    /// Encodes rows that may carry different messages.
    pub fn encode_rows(
        &self,
        noisy: &Matrix<T>,
        messages: &[&BitMessage],
    ) -> Result<EncodedBatch<T>> {
        let input = self.input_rows(noisy, messages)?;
        let (residual, trace) = self.net.forward_batch(&input)?;
        let mut stego = noisy.clone();
        for (v, &r) in stego.as_mut_slice().iter_mut().zip(residual.as_slice()) {
            *v += self.scale * r;
        }
        Ok(EncodedBatch { stego, trace })
    }

    pub fn encode(&self, noisy: &[f64], message: &BitMessage) -> Result<Vec<f64>> {
        let row: Vec<T> = noisy.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let x = Matrix::from_vec(1, row.len(), row)?;
        let out = self.encode_batch(&x, message)?;
        Ok(out
            .stego
            .as_slice()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect())
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn new(net: MlpNetwork<T>) -> Result<Self> {
        let last = net.layers().last().expect("non-empty").activation;
        if last != Activation::Sigmoid {
            return Err(Error::InvalidArgument(format!(
                "decoder output activation must be sigmoid, got {last:?}"
            )));
        }
        Ok(Self { net })
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn message_len(&self) -> usize {
        self.net.output_dim()
    }

    /// Soft bits in (0,1) and their hard decisions (`>= 0.5` reads as 1).
    pub fn decode(&self, embedding: &[T]) -> Result<(Vec<f64>, BitMessage)> {
        let soft: Vec<f64> = self
            .net
            .predict(embedding)?
            .into_iter()
            .map(T::to_f64_lossy)
            .collect();
        let hard = BitMessage::from_soft(&soft)?;
        Ok((soft, hard))
    }
}

/// Training hyperparameters for watermark embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Weight of the message term.
    pub lambda: f64,
    /// Noise draws per trigger per epoch.
    pub k_train: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Triggers per optimizer step.
    pub batch_size: usize,
    /// Decoupled weight decay for all three trained networks.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k_train: 8,
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Original and watermarked backbones with the verifier's encoder/decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub frozen_f: MlpNetwork<T>,
    pub watermarked_f: MlpNetwork<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub hyper: EmbedConfig,
}

/// Widths and scale for freshly initialized encoder/decoder networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxArch {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub perturbation_scale: f64,
}

impl Default for AuxArch {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128],
            decoder_hidden: vec![64],
            perturbation_scale: 0.25,
        }
    }
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        frozen_f: MlpNetwork<T>,
        watermarked_f: MlpNetwork<T>,
        encoder: Encoder<T>,
        decoder: Decoder<T>,
        hyper: EmbedConfig,
    ) -> Result<Self> {
        let bundle = Self {
            frozen_f,
            watermarked_f,
            encoder,
            decoder,
            hyper,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Starts from backbone `f` with random encoder/decoder; `f~ = f`.
    pub fn init<R: Rng + ?Sized>(
        f: MlpNetwork<T>,
        message_len: usize,
        arch: &AuxArch,
        hyper: EmbedConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (s, k) = (f.input_dim(), f.output_dim());
        let enc_spec = MlpSpec::uniform(
            s + message_len,
            &arch.encoder_hidden,
            s,
            Activation::Tanh,
            Activation::Tanh,
        );
        let dec_spec = MlpSpec::uniform(
            k,
            &arch.decoder_hidden,
            message_len,
            Activation::Tanh,
            Activation::Sigmoid,
        );
        let encoder = Encoder::new(
            MlpNetwork::random(&enc_spec, rng),
            T::from_f64_lossy(arch.perturbation_scale),
        )?;
        let decoder = Decoder::new(MlpNetwork::random(&dec_spec, rng))?;
        Self::new(f.clone(), f, encoder, decoder, hyper)
    }

    /// Checks the chain `s + n -(e)-> s -(f~)-> k -(d)-> n`.
    pub fn validate(&self) -> Result<()> {
        let s = self.encoder.image_dim();
        let n = self.encoder.message_len();
        let mismatch = |context, expected, actual| Error::DimensionMismatch {
            context,
            expected,
            actual,
        };
        if self.frozen_f.spec() != self.watermarked_f.spec() {
            return Err(Error::InvalidArgument(
                "frozen and watermarked backbones differ in shape".into(),
            ));
        }
        if self.watermarked_f.input_dim() != s {
            return Err(mismatch(
                "backbone input",
                s,
                self.watermarked_f.input_dim(),
            ));
        }
        let k = self.watermarked_f.output_dim();
        if self.decoder.embedding_dim() != k {
            return Err(mismatch("decoder input", k, self.decoder.embedding_dim()));
        }
        if self.decoder.message_len() != n {
            return Err(mismatch("decoder output", n, self.decoder.message_len()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.image_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.watermarked_f.output_dim()
    }

    pub fn message_len(&self) -> usize {
        self.encoder.message_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(s: usize, k: usize, seed: u64) -> MlpNetwork<f64> {
        let spec = MlpSpec::uniform(s, &[16], k, Activation::Tanh, Activation::Identity);
        MlpNetwork::random(&spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_satisfies_dimension_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ModelBundle::init(
            backbone(16, 8, 1),
            4,
            &AuxArch::default(),
            EmbedConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            (b.input_dim(), b.embedding_dim(), b.message_len()),
            (16, 8, 4)
        );
        assert_eq!(b.frozen_f, b.watermarked_f);
    }

    #[test]
    fn zero_final_encoder_layer_gives_constant_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ModelBundle::init(
            backbone(9, 4, 2),
            3,
            &AuxArch::default(),
            EmbedConfig::default(),
            &mut rng,
        )
        .unwrap();
        let last = b.encoder.net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.1 * i as f64);
        let expected: Vec<f64> = (0..9)
            .map(|i| b.encoder.scale * (0.1 * i as f64).tanh())
            .collect();
        for (img, bits) in [(vec![0.3; 9], vec![1, 0, 1]), (vec![0.9; 9], vec![0, 0, 0])] {
            let m = BitMessage::new(bits).unwrap();
            let out = b.encoder.encode(&img, &m).unwrap();
            for ((o, x), e) in out.iter().zip(&img).zip(&expected) {
                assert!((o - x - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_output_has_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = ModelBundle::init(
            backbone(256, 64, 5),
            32,
            &AuxArch::default(),
            EmbedConfig::default(),
            &mut rng,
        )
        .unwrap();
        let m = BitMessage::random(32, &mut rng).unwrap();
        assert_eq!(b.encoder.encode(&[0.5; 256], &m).unwrap().len(), 256);
        assert!(b.encoder.encode(&[0.5; 255], &m).is_err());
    }

    #[test]
    fn zero_decoder_reads_all_ones() {
        let spec = MlpSpec::uniform(4, &[], 3, Activation::Tanh, Activation::Sigmoid);
        let mut net = MlpNetwork::<f64>::random(&spec, &mut ChaCha8Rng::seed_from_u64(6));
        net.params_mut().for_each(|p| *p = 0.0);
        let d = Decoder::new(net).unwrap();
        let (soft, hard) = d.decode(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(soft, vec![0.5; 3]);
        assert_eq!(hard, BitMessage::new(vec![1, 1, 1]).unwrap());
    }

    #[test]
    fn decoder_without_sigmoid_is_rejected() {
        let spec = MlpSpec::uniform(4, &[], 3, Activation::Tanh, Activation::Tanh);
        let net = MlpNetwork::<f64>::random(&spec, &mut ChaCha8Rng::seed_from_u64(7));
        assert!(Decoder::new(net).is_err());
    }
}
