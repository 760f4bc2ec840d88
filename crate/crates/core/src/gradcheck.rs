//! Finite-difference oracles for the hand-written gradients.

use rand::seq::index::sample;

use crate::rng::rng_from_seed;
use crate::tensor_nn::{Mlp, MlpGrads};

/// Denominator floor. Below it the check is an absolute one at
/// `1e-4 · floor`, well above central-difference roundoff for O(10) losses
/// (a bias feeding batch norm has true gradient 0 but a numeric one near 1e-9).
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// `(f(h) − f(−h)) / 2h` where `f(t)` evaluates the objective with the probed
/// coordinate moved by `t`.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// A single scalar parameter: `(tensor, index)` in [`Mlp::parameters`] order.
pub type ParamSlot = (usize, usize);

/// `count` distinct parameter slots drawn uniformly over all scalars.
pub fn sample_param_slots(net: &Mlp, count: usize, seed: u64) -> Vec<ParamSlot> {
    let sizes: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng_from_seed(seed);
    let mut flat: Vec<usize> = sample(&mut rng, total, count.min(total)).into_vec();
    flat.sort_unstable();
    flat.into_iter()
        .map(|mut i| {
            let mut t = 0;
            while i >= sizes[t] {
                i -= sizes[t];
                t += 1;
            }
            (t, i)
        })
        .collect()
}

/// Copy of `net` with one parameter moved by `h`.
pub fn perturbed(net: &Mlp, slot: ParamSlot, h: f64) -> Mlp {
    let mut out = net.clone();
    out.parameters_mut()[slot.0][slot.1] += h;
    out
}

pub fn grad_at(grads: &MlpGrads, slot: ParamSlot) -> f64 {
    grads.tensors()[slot.0][slot.1]
}

/// Largest relative error between `grads` and central differences of `loss`
/// over the given slots of `net`.
pub fn max_param_error(
    net: &Mlp,
    grads: &MlpGrads,
    slots: &[ParamSlot],
    h: f64,
    mut loss: impl FnMut(&Mlp) -> f64,
) -> f64 {
    slots
        .iter()
        .map(|&slot| {
            let num = central_difference(h, |t| loss(&perturbed(net, slot, t)));
            relative_error(grad_at(grads, slot), num)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use crate::tensor_nn::{DenseMatrix, MlpConfig, Mode};

    #[test]
    fn relative_error_floor_and_symmetry() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(1.0, 2.0), 0.5);
        assert!((relative_error(0.0, 1e-9) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn slots_are_distinct_and_in_range() {
        let net = Mlp::new(MlpConfig::stack(3, 4, 2, 2).with_batch_norm(true)).unwrap();
        let slots = sample_param_slots(&net, 30, 1);
        assert_eq!(slots.len(), 30);
        let params = net.parameters();
        for w in slots.windows(2) {
            assert!(w[0] < w[1]);
        }
        for (t, i) in slots {
            assert!(i < params[t].len());
        }
    }

    /// Three ReLU layers with train-mode batch norm and dropout, fixed batch
    /// and fixed dropout masks: every parameter type is probed.
    #[test]
    fn mlp_backprop_matches_central_differences() {
        let cfg = MlpConfig::stack(4, 7, 3, 3).with_batch_norm(true).with_dropout(0.2).with_seed(5);
        let net = Mlp::new(cfg).unwrap();
        let mut rng = rng_from_seed(6);
        let x = DenseMatrix::new(16, 4, normal_vec(&mut rng, 64)).unwrap();
        let target = DenseMatrix::new(16, 3, normal_vec(&mut rng, 48)).unwrap();
        let loss = |net: &Mlp| {
            let (out, _) = net.forward(&x, Mode::Train, &mut rng_from_seed(77)).unwrap();
            0.5 * out.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let (out, cache) = net.forward(&x, Mode::Train, &mut rng_from_seed(77)).unwrap();
        let mut g = out.clone();
        g.axpy(-1.0, &target);
        let (grads, input_grad) = net.backward(&cache, &g).unwrap();

        let slots = sample_param_slots(&net, 60, 9);
        let kinds: std::collections::BTreeSet<usize> = slots.iter().map(|s| s.0).collect();
        assert!(kinds.len() >= 6, "slots should hit weights, biases and bn params");
        assert!(max_param_error(&net, &grads, &slots, 1e-5, loss) <= 1e-4);

        for idx in [0, 5, 17, 40, 63] {
            let num = central_difference(1e-5, |t| {
                let mut xp = x.clone();
                xp.as_mut_slice()[idx] += t;
                let (out, _) = net.forward(&xp, Mode::Train, &mut rng_from_seed(77)).unwrap();
                0.5 * out.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            });
            assert!(relative_error(input_grad.as_slice()[idx], num) <= 1e-4);
        }
    }
}
