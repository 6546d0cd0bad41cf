use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, ParamAccess, ParamName, Scalar, Tensor};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// The decay shrinks a parameter by `lr * wd` before the adaptive step, so it
/// never passes through the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<ParamName, Tensor<S>>,
    second: BTreeMap<ParamName, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: ParamName) -> Option<&Tensor<S>> {
        self.first.get(name)
    }

    /// Applies one update to every parameter that has a gradient.
    /// Parameters absent from `grads` (frozen ones) are left untouched.
    pub fn step<P: ParamAccess<S> + ?Sized>(&mut self, params: &mut P, grads: &GradMap<S>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .param(name)
                .ok_or_else(|| contract!("gradient for unknown parameter {name}"))?;
            if p.shape() != g.shape() {
                return Err(contract!(
                    "gradient shape {:?} for {name} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if let Some(m) = self.first.get(name) {
                if m.shape() != p.shape() {
                    return Err(contract!(
                        "moment shape {:?} for {name} does not match parameter {:?}",
                        m.shape(),
                        p.shape()
                    ));
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let (lr, wd) = (S::lit(c.learning_rate), S::lit(c.weight_decay));
        let (b1, b2, eps) = (S::lit(c.beta1), S::lit(c.beta2), S::lit(c.epsilon));
        let t = self.step as i32;
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let decay = S::one() - lr * wd;

        for (name, g) in grads {
            let p = params.param_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
