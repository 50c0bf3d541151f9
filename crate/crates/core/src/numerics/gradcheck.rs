//! Finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{Graph, Mode, ParamId, ParamStore};
use super::tensor::{Array, Tensor};
use crate::error::Result;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs() + fd.abs())
}

/// Max over coordinates of `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)` for a
/// scalar function of one tensor, using central differences of step `eps`.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::leaf(x.clone());
    let y = f(&leaf)?;
    y.backward()?;
    let ad = leaf.grad().unwrap_or_else(|| Array::zeros(x.raw_dim()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, g) in ad.iter().enumerate() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let plus = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let minus = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig;
        worst = worst.max(rel_err(*g, (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Worst gradient error found by [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Checks gradients of a scalar loss with respect to model parameters.
///
/// `loss` is evaluated in [`Mode::Eval`] so that it is deterministic. At most
/// `max_coords` evenly strided coordinates are probed per parameter.
pub fn grad_check_params<F>(
    loss: F,
    store: &ParamStore,
    eps: f64,
    max_coords: usize,
) -> Result<ParamCheck>
where
    F: Fn(&Graph) -> Result<Tensor>,
{
    let rng = || ChaCha8Rng::seed_from_u64(0);
    let g = Graph::new(store, Mode::Eval, rng());
    loss(&g)?.backward()?;
    let grads = g.grads();

    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for (pi, entry) in store.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let id = ParamId(pi);
        let n = entry.value.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let ad = grads[pi].as_ref().map_or(0.0, |g| g.as_slice().unwrap()[i]);
            let orig = entry.value.as_slice().unwrap()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.value_mut(id).as_slice_mut().unwrap()[i] = v;
                let g = Graph::new(&probe, Mode::Eval, rng());
                Ok(loss(&g)?.item())
            };
            let plus = eval(orig + eps)?;
            let minus = eval(orig - eps)?;
            probe.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let err = rel_err(ad, (plus - minus) / (2.0 * eps));
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = entry.name.clone();
            }
        }
    }
    Ok(report)
}
