use std::collections::BTreeMap;

use super::Registry;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, weight_decay, ..Self::default() }
    }
}

/// Per-parameter moments for AdamW, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// One AdamW step over `names`, reading each tensor's `grad` slot.
    /// Tensors not listed are left untouched. Gradients are consumed.
    pub fn step(&mut self, params: &mut Registry, names: &[String]) -> Result<()> {
        for name in names {
            match params.get(name) {
                None => bail!(State, "parameter {name} is not in the registry"),
                Some(t) if t.grad.is_none() => bail!(State, "parameter {name} has no gradient"),
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for name in names {
            let p = params.get_mut(name).expect("checked above");
            let g = p.grad.take().expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let theta = p.values[i] * (1.0 - c.lr * c.weight_decay);
                p.values[i] = theta - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(name: &str, value: f64, grad: f64) -> Registry {
        let mut r = Registry::new();
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.grad = Some(vec![grad]);
        r.insert(name.to_string(), t);
        r
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut r = one("w", 1.5, 0.0);
        let mut opt = OptimizerState::new(AdamWConfig::new(2e-4, 0.01));
        opt.step(&mut r, &["w".into()]).unwrap();
        assert_eq!(r["w"].values[0], 1.5 * (1.0 - 2e-6));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut r = one("w", 0.0, 1.0);
        let mut opt = OptimizerState::new(AdamWConfig::new(2e-4, 0.0));
        opt.step(&mut r, &["w".into()]).unwrap();
        assert!((r["w"].values[0] + 2e-4).abs() < 1e-11);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut r = one("w", 0.0, 1.0);
        r.get_mut("w").unwrap().grad = None;
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut r, &["w".into()]), Err(crate::Error::State(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn untouched_outside_set() {
        let mut r = one("w", 1.0, 1.0);
        let mut other = Tensor::new(vec![1], vec![7.0]).unwrap();
        other.grad = Some(vec![3.0]);
        r.insert("u".into(), other);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut r, &["w".into()]).unwrap();
        assert_eq!(r["u"].values[0], 7.0);
    }
}
