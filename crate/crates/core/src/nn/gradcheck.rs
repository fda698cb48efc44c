use super::mlp::{Gradients, MlpNetwork};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Denominator floor used when both gradients are tiny.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Compares an analytic gradient with central finite differences.
///
/// Returns `max_i |a_i - fd_i| / max(|a_i|, |fd_i|, floor)` where
/// `fd_i = (L(p + h e_i) - L(p - h e_i)) / 2h`.
pub fn gradient_check_flat(
    point: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if point.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient check",
            expected: point.len(),
            actual: analytic.len(),
        });
    }
    if step <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: "loss during gradient check",
                layer: 0,
                index: i,
            });
        }
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`gradient_check_flat`] over the parameters of one network.
pub fn gradient_check<T: Scalar>(
    net: &MlpNetwork<T>,
    analytic: &Gradients<T>,
    step: f64,
    mut loss: impl FnMut(&MlpNetwork<T>) -> T,
) -> Result<f64> {
    if !analytic.congruent_with(net) {
        return Err(invalid("gradient shape does not match network"));
    }
    let point: Vec<f64> = net.flatten().into_iter().map(T::to_f64_lossy).collect();
    let grads: Vec<f64> = analytic
        .flatten()
        .into_iter()
        .map(T::to_f64_lossy)
        .collect();
    let mut probe = net.clone();
    gradient_check_flat(&point, &grads, step, DEFAULT_FLOOR, |p| {
        let cast: Vec<T> = p.iter().map(|&v| T::from_f64_lossy(v)).collect();
        probe.set_flat(&cast).expect("same shape");
        loss(&probe).to_f64_lossy()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Matrix, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_output_loss(net: &MlpNetwork<f64>, x: &Matrix<f64>) -> (f64, Gradients<f64>) {
        let (out, trace) = net.forward_batch(x).unwrap();
        let loss = out.as_slice().iter().sum();
        let ones = Matrix::from_fn(out.rows(), out.cols(), |_, _| 1.0);
        (loss, net.backward(&trace, &ones).unwrap().grads)
    }

    #[test]
    fn linear_net_linear_loss_is_exact() {
        let spec = MlpSpec::uniform(3, &[], 2, Activation::Identity, Activation::Identity);
        let net = MlpNetwork::<f64>::random(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.0, 2.0, 1.0]]).unwrap();
        let (_, g) = sum_output_loss(&net, &x);
        // Central differences are exact for a linear loss; a wide step keeps
        // rounding out of the comparison.
        let err = gradient_check(&net, &g, 1e-2, |n| sum_output_loss(n, &x).0).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn two_layer_tanh_net_agrees() {
        let spec = MlpSpec::uniform(4, &[6], 3, Activation::Tanh, Activation::Sigmoid);
        let net = MlpNetwork::<f64>::random(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let x = Matrix::from_fn(2, 4, |i, j| ((i + 2 * j) as f64).sin());
        let (_, g) = sum_output_loss(&net, &x);
        let err = gradient_check(&net, &g, 1e-6, |n| sum_output_loss(n, &x).0).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let spec = MlpSpec::uniform(4, &[6], 3, Activation::Tanh, Activation::Identity);
        let net = MlpNetwork::<f64>::random(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Matrix::from_fn(2, 4, |i, j| ((i * 3 + j) as f64).cos());
        let (_, mut g) = sum_output_loss(&net, &x);
        let w = g.layers[0].weight.get(1, 2);
        g.layers[0].weight.set(1, 2, 2.0 * w);
        let err = gradient_check(&net, &g, 1e-6, |n| sum_output_loss(n, &x).0).unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn non_finite_loss_is_fatal() {
        let r = gradient_check_flat(&[1.0], &[0.0], 1e-6, DEFAULT_FLOOR, |_| f64::NAN);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
