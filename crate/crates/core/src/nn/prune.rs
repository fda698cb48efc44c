use super::mlp::MlpNetwork;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Number of weights zeroed by [`l1_unstructured_prune`] at `fraction`.
pub fn prune_count(total_weights: usize, fraction: f64) -> usize {
    ((fraction * total_weights as f64).floor() as usize).min(total_weights)
}

/// Global unstructured magnitude pruning.
///
/// Ranks every weight of every layer by `|w|` (biases are never pruned) and
/// zeroes the `floor(fraction * total)` smallest. Ties are broken by
/// `(layer, flat index)` so the result is deterministic.
pub fn l1_unstructured_prune<T: Scalar>(
    net: &MlpNetwork<T>,
    fraction: f64,
) -> Result<MlpNetwork<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("prune fraction {fraction} outside [0, 1]")));
    }
    let count = prune_count(net.weight_count(), fraction);
    let mut pruned = net.clone();
    if count == 0 {
        return Ok(pruned);
    }

    let mut ranked: Vec<(T, usize, usize)> = Vec::with_capacity(net.weight_count());
    for (l, layer) in net.layers().iter().enumerate() {
        ranked.extend(
            layer
                .weight
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.abs(), l, i)),
        );
    }
    ranked.select_nth_unstable_by(count - 1, |a, b| {
        a.0.partial_cmp(&b.0)
            .expect("network weights are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let layers = pruned.layers_mut();
    for &(_, l, i) in &ranked[..count] {
        layers[l].weight.as_mut_slice()[i] = T::zero();
    }
    Ok(pruned)
}
