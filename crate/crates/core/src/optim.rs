//! Adam and reduce-on-plateau learning-rate scheduling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::param::Module;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias-corrected moments, one moment pair per named parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// Scalar hyper-parameters and step count, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
        }
    }

    pub fn from_hyper(h: AdamHyper) -> Self {
        Adam {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            t: h.t,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter of `model` from `grads`. A parameter
    /// without a gradient is treated as having a zero gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, grads: &Gradients<T>) -> Result<()> {
        let mut collected: Vec<(String, Option<Tensor<T>>)> = Vec::new();
        model.visit_params("", &mut |name, p| collected.push((name, grads.param(p).cloned())));
        for (name, g) in &collected {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
        }
        self.t += 1;
        let mut grads_by_name: BTreeMap<String, Option<Tensor<T>>> = collected.into_iter().collect();
        let mut pending: Option<Error> = None;
        model.visit_params_mut("", &mut |name, p| {
            if pending.is_some() {
                return;
            }
            let g = grads_by_name
                .remove(&name)
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
            if let Err(e) = self.update(&name, p.value_mut(), &g) {
                pending = Some(e);
            }
        });
        match pending {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Applies the current step `t` to one tensor. Callers advance `t`.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() || v.shape() != param.shape() {
            return Err(Error::shape("adam moments", m.shape(), param.shape()));
        }
        let t = self.t.max(1) as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Which validation quantity the plateau scheduler watches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Lower is better.
    ValLoss,
    /// Higher is better.
    ValDice,
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// strict improvement of the monitored value; never goes below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: None,
            counter: 0,
        }
    }

    /// Consumes one epoch's value, where lower is better. Returns the
    /// learning rate for the next epoch.
    pub fn update(&mut self, value: f64) -> f64 {
        let improved = value.is_finite() && self.best.is_none_or(|b| value < b);
        if improved {
            self.best = Some(value);
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.counter = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::param::ParamSet;

    fn one_step(lr: f64, w: f64, g: f64) -> f64 {
        let mut set = ParamSet::new();
        set.push("w", Tensor::scalar(w));
        let mut graph = Graph::<f64>::new();
        let wv = graph.param(set.get(0)).unwrap();
        // loss = g·w gives dloss/dw = g
        let gv = graph.input(Tensor::scalar(g)).unwrap();
        let l = graph.mul(wv, gv).unwrap();
        let grads = graph.backward(l).unwrap();
        let mut adam = Adam::new(lr);
        adam.step(&mut set, &grads).unwrap();
        assert_eq!(adam.t, 1);
        set.get(0).value().data()[0]
    }

    #[test]
    fn first_step_hand_value() {
        let w = one_step(0.001, 1.0, 0.5);
        let expect = 1.0 - 0.001 * (0.5 / (0.5 + 1e-8));
        assert!((w - expect).abs() < 1e-15);
        assert!((w - 0.9990).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_weight() {
        assert_eq!(one_step(0.001, 1.0, 0.0), 1.0);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        assert_eq!(one_step(0.0, 0.7, 3.0), 0.7);
    }

    #[test]
    fn parameters_update_independently() {
        let mut adam = Adam::<f64>::new(0.01);
        adam.t = 1;
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        adam.update("a", &mut a, &Tensor::scalar(2.0)).unwrap();
        let a_after = a.clone();
        adam.update("b", &mut b, &Tensor::scalar(-5.0)).unwrap();
        assert_eq!(a, a_after);
        // the first bias-corrected step moves by ≈ lr·sign(g)
        assert!((a.data()[0] - 0.99).abs() < 1e-8);
        assert!((b.data()[0] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn plateau_trace() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 2, 1e-6);
        let lrs: Vec<f64> = [1.0, 0.9, 0.95, 0.92].iter().map(|&l| s.update(l)).collect();
        assert_eq!(lrs[..3], [1e-3, 1e-3, 1e-3]);
        assert!((lrs[3] - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_never_increases_and_clamps() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 10, 1e-6);
        for i in 0..20 {
            assert_eq!(s.update(1.0 - i as f64 * 0.01), 1e-3);
        }
        let mut s = PlateauScheduler::new(1e-6, 0.1, 1, 1e-6);
        for _ in 0..5 {
            assert_eq!(s.update(5.0), 1e-6);
        }
        let mut s = PlateauScheduler::new(1e-3, 0.5, 1, 1e-6);
        let mut prev = s.lr;
        for i in 0..40 {
            let lr = s.update(((i * 7) % 5) as f64);
            assert!(lr <= prev && lr >= 1e-6);
            prev = lr;
        }
    }
}
