//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::invalid(
                "OptimizerKind",
                format!("unknown optimizer {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum for SGD, beta1 for Adam.
    pub momentum: f64,
    pub beta2: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta2: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("OptimizerSpec", msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum/beta1 must be in [0, 1), got {}", self.momentum));
        }
        if self.kind == OptimizerKind::Adam && !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Optimizer state. Moment buffers are created zeroed on the first step and
/// must keep the same shapes afterwards.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f64> {
    spec: OptimizerSpec,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                expected: format!("{} gradients", params.len()),
                got: grads.len().to_string(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    expected: format!("parameter {i}: {}", p.shape()),
                    got: g.shape().to_string(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if self.spec.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                expected: "the parameter shapes of the first step".into(),
                got: "a different parameter list".into(),
            });
        }
        self.step += 1;
        let lr = T::lit(self.spec.learning_rate);
        let mu = T::lit(self.spec.momentum);
        let wd = T::lit(self.spec.weight_decay);
        match self.spec.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let g = g + wd * *p;
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.spec.momentum;
                let b2 = self.spec.beta2;
                let t = self.step as i32;
                let c1 = T::lit(1.0 - b1.powi(t));
                let c2 = T::lit(1.0 - b2.powi(t));
                let (b1, b2) = (T::lit(b1), T::lit(b2));
                let eps = T::lit(ADAM_EPSILON);
                let one = T::one();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((p, &g), m), v) in it {
                        let g = g + wd * *p;
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
