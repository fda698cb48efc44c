use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One dense layer: `a = act(W x + b)` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: weight.rows(),
                actual: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Layer widths and activations, without parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `dims[0]` is the input width, `dims.last()` the output width.
    pub dims: Vec<usize>,
    /// One activation per layer (`dims.len() - 1` entries).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "MlpSpec needs n+1 widths for n activations (got {} widths, {} activations)",
                dims.len(),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        Ok(Self { dims, activations })
    }

    /// Hidden layers share `hidden_act`; the last layer uses `output_act`.
    pub fn uniform(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        Self { dims, activations }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }
}

/// Multi-layer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork<T> {
    layers: Vec<Layer<T>>,
}

/// Per-layer values kept by [`MlpNetwork::forward_batch`] for the backward pass.
///
/// `activations[0]` is the input batch and `activations[l + 1]` the output of
/// layer `l`.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub activations: Vec<Matrix<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.activations
            .last()
            .expect("trace holds the input at least")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients with the same shapes as the owning network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradient<T>>,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backprop<T> {
    pub grads: Gradients<T>,
    /// Gradient with respect to the input batch, for chaining networks.
    pub input_grad: Matrix<T>,
}

impl<T: Scalar> MlpNetwork<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: if i == 0 {
                        "layer chain (1)"
                    } else {
                        "layer chain"
                    },
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if let Some(index) = layer.weight.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "layer weight",
                    layer: l,
                    index,
                });
            }
            if let Some(index) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "layer bias",
                    layer: l,
                    index,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian initialization scaled by fan-in (doubled for ReLU), zero biases.
    pub fn random<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .dims
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
                let std = T::from_f64_lossy((gain / fan_in as f64).sqrt());
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| T::sample_standard_normal(rng) * std);
                Layer {
                    weight,
                    bias: vec![T::zero(); fan_out],
                    activation: act,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::output_dim));
        MlpSpec {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.layers.iter().map(|l| l.bias.len()).sum::<usize>()
    }

    /// Fraction of weights (biases excluded) that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let zeros: usize = self
            .layers
            .iter()
            .map(|l| l.weight.as_slice().iter().filter(|v| v.is_zero()).count())
            .sum();
        zeros as f64 / self.weight_count() as f64
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weight.as_slice().len());
            l.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// Euclidean distance between parameter vectors of equal-shape networks.
    pub fn param_distance(&self, other: &Self) -> Result<T> {
        if self.spec() != other.spec() {
            return Err(Error::InvalidArgument(
                "networks have different shapes".into(),
            ));
        }
        let sq: T = self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(&a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt())
    }

    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, Trace<T>)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let (out, trace) = self.forward_batch(&x)?;
        Ok((out.into_vec(), trace))
    }

    /// Forward pass over a batch with one sample per row.
    pub fn forward_batch(&self, input: &Matrix<T>) -> Result<(Matrix<T>, Trace<T>)> {
        self.check_input(input.cols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let a = Self::apply_layer(layer, activations.last().expect("non-empty"));
            activations.push(a);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((out, Trace { activations }))
    }

    /// Forward pass without keeping a trace.
    pub fn predict_batch(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(input.cols())?;
        let mut a = Self::apply_layer(&self.layers[0], input);
        for layer in &self.layers[1..] {
            a = Self::apply_layer(layer, &a);
        }
        Ok(a)
    }

    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.predict_batch(&x)?.into_vec())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: cols,
            });
        }
        Ok(())
    }

    fn apply_layer(layer: &Layer<T>, x: &Matrix<T>) -> Matrix<T> {
        let mut z = x.matmul_transposed(&layer.weight);
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v = layer.activation.apply(*v + b);
            }
        }
        z
    }

    /// Back-propagates `output_grad` (dL/d output, one row per sample).
    pub fn backward(&self, trace: &Trace<T>, output_grad: &Matrix<T>) -> Result<Backprop<T>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "trace depth",
                expected: self.layers.len() + 1,
                actual: trace.activations.len(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (&trace.activations[l], &trace.activations[l + 1]);
            if inp.cols() != layer.input_dim() || out.cols() != layer.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "trace layer width",
                    expected: layer.output_dim(),
                    actual: out.cols(),
                });
            }
        }
        let out = trace.output();
        if output_grad.shape() != out.shape() {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: out.cols(),
                actual: output_grad.cols(),
            });
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_out = &trace.activations[l + 1];
            let a_in = &trace.activations[l];
            // dZ = dA * act'(Z), with act' written in terms of the output.
            let mut dz = upstream;
            for (g, &a) in dz.as_mut_slice().iter_mut().zip(a_out.as_slice()) {
                *g *= layer.activation.derivative_from_output(a);
            }
            let weight = dz.transposed_matmul(a_in);
            let bias = dz.column_sums();
            upstream = dz.matmul(&layer.weight);
            layers.push(LayerGradient { weight, bias });
        }
        layers.reverse();
        Ok(Backprop {
            grads: Gradients { layers },
            input_grad: upstream,
        })
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &MlpNetwork<T>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn congruent_with(&self, net: &MlpNetwork<T>) -> bool {
        self.layers.len() == net.layers().len()
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|(g, l)| g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.layers {
            g.weight.scale(s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Entries in the same canonical order as [`MlpNetwork::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.as_slice().iter().chain(g.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|g| g.weight.as_mut_slice().iter_mut().chain(g.bias.iter_mut()))
    }

    /// First non-finite entry as `(layer, index within layer)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.layers.iter().enumerate().find_map(|(l, g)| {
            g.weight
                .as_slice()
                .iter()
                .chain(&g.bias)
                .position(|v| !v.is_finite())
                .map(|i| (l, i))
        })
    }

    pub fn norm(&self) -> T {
        self.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}
