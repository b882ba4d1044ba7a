use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::Real;

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Stage-I (masked reconstruction) defaults.
    pub fn reconstruction() -> Self {
        AdamWConfig {
            lr: 1e-3,
            ..Self::segmentation()
        }
    }

    /// Stage-II (segmentation) defaults.
    pub fn segmentation() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of every trainable parameter in `params`:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// p ← p − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
/// ```
///
/// Parameters without `requires_grad` are skipped and never written.
/// Gradient buffers are cleared after the update.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
    if let Some((name, _)) = params
        .iter()
        .find(|(_, p)| p.tensor.requires_grad() && p.tensor.grad().is_none())
    {
        return Err(Error::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let decay = T::from_f64_lossy(1.0 - cfg.lr * cfg.weight_decay);
    let step_size = T::from_f64_lossy(cfg.lr / bc1);
    let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);

    for (name, p) in params.iter_mut() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let denom = v[i].sqrt() / bc2_sqrt + eps;
            data[i] = data[i] * decay - step_size * m[i] / denom;
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use crate::params::Role;

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(value).with_requires_grad(true);
        t.set_grad(Some(vec![grad])).unwrap();
        s.insert("w", Role::Head, t).unwrap();
        s
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(1.25, 0.0);
        let mut st = OptimState::new(cfg(0.0));
        adamw_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.25);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut s = store(2.0, 0.5);
        let mut st = OptimState::new(cfg(0.05));
        adamw_step(&mut s, &mut st).unwrap();
        // m̂ = g, v̂ = g², so the Adam part is lr·g/(|g| + ε).
        let expected = 2.0 * (1.0 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn two_constant_steps_follow_recurrence() {
        let mut s = store(0.0, 1.0);
        let mut st = OptimState::new(cfg(0.0));
        adamw_step(&mut s, &mut st).unwrap();
        s.get_mut("w").unwrap().set_grad(Some(vec![1.0])).unwrap();
        adamw_step(&mut s, &mut st).unwrap();
        // constant g: m_t/(1-β₁ᵗ) = 1 and v_t/(1-β₂ᵗ) = 1 at every step
        let expected = -0.1 / (1.0 + 1e-8) * 2.0;
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
        let (m, v) = st.moments("w").unwrap();
        assert!((m[0] - (1.0 - 0.9f64.powi(2))).abs() < 1e-12);
        assert!((v[0] - (1.0 - 0.95f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_untouched_and_missing_grads_error() {
        let mut s = store(1.0, 3.0);
        let mut frozen = Tensor::<f64>::from_f64(&[2], &[0.3, -0.7]).unwrap();
        frozen.set_requires_grad(false);
        let before = frozen.clone();
        s.insert("frozen", Role::Backbone, frozen).unwrap();
        let mut st = OptimState::new(cfg(0.05));
        adamw_step(&mut s, &mut st).unwrap();
        assert!(s.get("frozen").unwrap().bit_eq(&before));

        // trainable without gradient
        let err = adamw_step(&mut s, &mut st).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "w"));
    }
}
