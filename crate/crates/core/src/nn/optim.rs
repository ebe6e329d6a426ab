use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every trainable parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// One bias-corrected Adam update of every non-frozen parameter.
/// Every trainable parameter must carry a gradient.
pub fn adam_step<T: Scalar>(params: &mut ParameterSet<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let trainable: Vec<String> = params.names().filter(|n| !params.is_frozen(n)).map(str::to_string).collect();
    for name in &trainable {
        if params.get(name).and_then(|p| p.grad()).is_none() {
            return Err(invalid!("missing gradient for parameter {name}"));
        }
    }
    state.step += 1;
    let c = state.cfg;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for name in trainable {
        let p = params.get_mut(&name).expect("listed above");
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name).or_insert_with(|| vec![T::zero(); n]);
        let g = p.grad().expect("checked above").to_vec();
        for (i, val) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *val -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::full(&[1], 2.0));
        ps.get_mut("x").unwrap().set_grad(vec![1.0]).unwrap();
        let mut st = OptimizerState::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam_step(&mut ps, &mut st).unwrap();
        let want = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.get("x").unwrap().data()[0] - want).abs() < 1e-12);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn frozen_and_zero_grad_parameters_do_not_move() {
        let mut ps = ParameterSet::<f32>::new();
        ps.insert("a", Tensor::full(&[3], 1.5));
        ps.insert("b", Tensor::full(&[2], -0.5));
        ps.freeze("a").unwrap();
        ps.get_mut("a").unwrap().set_grad(vec![1.0; 3]).unwrap();
        ps.get_mut("b").unwrap().set_grad(vec![0.0; 2]).unwrap();
        let before = ps.snapshot(|_| true);
        let mut st = OptimizerState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps.snapshot(|_| true), before);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = ParameterSet::<f32>::new();
        ps.insert("a", Tensor::full(&[1], 0.0));
        let mut st = OptimizerState::new(AdamConfig::default());
        assert!(adam_step(&mut ps, &mut st).is_err());
        assert_eq!(st.step_count(), 0);
        ps.freeze("a").unwrap();
        assert!(adam_step(&mut ps, &mut st).is_ok());
    }
}
