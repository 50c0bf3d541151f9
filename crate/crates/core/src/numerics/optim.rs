//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::f64::consts::PI;

use super::nn::ParamStore;
use super::tensor::Array;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Array>,
    pub second: Vec<Array>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Array::zeros(e.value.raw_dim()))
                .collect()
        };
        OptimizerState {
            first: zeros(),
            second: zeros(),
            step: 0,
            base_lr,
            weight_decay,
        }
    }
}

/// One AdamW update at learning rate `lr`. Parameters without a gradient or
/// marked frozen are left untouched (their moments too).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Array>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::InvalidInput(format!(
            "{} gradients and {} optimizer slots for {} parameters",
            grads.len(),
            state.first.len(),
            store.len()
        )));
    }
    for (i, (entry, grad)) in store.entries().iter().zip(grads).enumerate() {
        if let Some(g) = grad {
            if entry.trainable && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {} (slot {i})",
                    entry.name
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    let wd = state.weight_decay;
    for i in 0..store.len() {
        let Some(g) = &grads[i] else { continue };
        let entry = store.entry(super::nn::ParamId(i));
        if !entry.trainable {
            continue;
        }
        let decay = if entry.decay { wd } else { 0.0 };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = store.value_mut(super::nn::ParamId(i));
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *p -= lr * decay * *p;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPS);
            });
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::ParamId;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, IxDyn};

    fn scalar_store(v: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Array::from_elem(IxDyn(&[1]), v), decay);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = scalar_store(1.25, true);
        let mut state = OptimizerState::new(&store, 1e-3, 0.0);
        let g = vec![Some(Array::zeros(IxDyn(&[1])))];
        for _ in 0..5 {
            adamw_step(&mut store, &g, &mut state, 1e-2).unwrap();
        }
        assert_eq!(store.value(ParamId(0))[[0]], 1.25);
    }

    #[test]
    fn zero_gradient_with_decay_scales() {
        let mut store = scalar_store(2.0, true);
        let mut state = OptimizerState::new(&store, 0.1, 0.05);
        let g = vec![Some(Array::zeros(IxDyn(&[1])))];
        adamw_step(&mut store, &g, &mut state, 0.1).unwrap();
        assert_abs_diff_eq!(store.value(ParamId(0))[[0]], 2.0 * (1.0 - 0.1 * 0.05), epsilon = 1e-15);
    }

    #[test]
    fn matches_scalar_oracle_for_constant_gradient() {
        let (lr, wd) = (1e-2, 0.05);
        let mut store = scalar_store(0.7, true);
        let mut state = OptimizerState::new(&store, lr, wd);
        let g = vec![Some(Array::from_elem(IxDyn(&[1]), 1.0))];

        // hand-rolled scalar AdamW
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            p *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            adamw_step(&mut store, &g, &mut state, lr).unwrap();
        }
        assert_abs_diff_eq!(store.value(ParamId(0))[[0]], p, epsilon = 1e-10);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0, true);
        let mut state = OptimizerState::new(&store, 1e-3, 0.0);
        let g = vec![Some(array![f64::NAN].into_dyn())];
        let err = adamw_step(&mut store, &g, &mut state, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(store.value(ParamId(0))[[0]], 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = scalar_store(1.0, true);
        store.set_trainable("w", false);
        let mut state = OptimizerState::new(&store, 1e-3, 0.05);
        let g = vec![Some(array![3.0].into_dyn())];
        adamw_step(&mut store, &g, &mut state, 1e-1).unwrap();
        assert_eq!(store.value(ParamId(0))[[0]], 1.0);
    }

    #[test]
    fn schedule_landmarks() {
        let (total, warm, lr) = (110, 10, 1e-3);
        assert_eq!(cosine_schedule(0, total, warm, lr), 0.0);
        assert_abs_diff_eq!(cosine_schedule(5, total, warm, lr), 5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_schedule(warm, total, warm, lr), lr, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_schedule(60, total, warm, lr), lr / 2.0, epsilon = 1e-15);
        assert!(cosine_schedule(total, total, warm, lr) < 1e-15);
        assert!(cosine_schedule(total - 1, total, warm, lr) < 1e-6);
    }
}
