use serde::{Deserialize, Serialize};

use super::{Param, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { learning_rate, momentum }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerKind::Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::SgdMomentum { learning_rate, momentum } => {
                learning_rate > 0.0 && (0.0..1.0).contains(&momentum)
            }
            OptimizerKind::Adam { learning_rate, beta1, beta2, epsilon } => {
                learning_rate > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer hyper-parameters plus per-parameter accumulators.
///
/// SGD with momentum: `v <- m * v + g; p <- p - lr * v`.
/// Adam: the usual bias-corrected first/second moment update.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, step_count: 0, first: Vec::new(), second: Vec::new() })
    }

    /// First-moment (velocity) buffer of parameter `i`, if allocated.
    pub fn velocity(&self, i: usize) -> Option<&[T]> {
        self.first.get(i).map(Vec::as_slice)
    }

    /// Apply one update to `params` using their accumulated gradients.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() || params.iter().zip(&self.first).any(|(p, b)| p.value.len() != b.len()) {
            return Err(Error::shape("optimizer_step", "parameter set changed between steps"));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { learning_rate, momentum } => {
                let (lr, m) = (T::from_f64(learning_rate), T::from_f64(momentum));
                for (p, v) in params.iter_mut().zip(&mut self.first) {
                    for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                        *vel = m * *vel + g;
                        *w = *w - lr * *vel;
                    }
                }
            }
            OptimizerKind::Adam { learning_rate, beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                let (one, eps) = (T::one(), T::from_f64(epsilon));
                let step = T::from_f64(learning_rate / c1);
                let c2 = T::from_f64(c2);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (one - b1) * g;
                        *vi = b2 * *vi + (one - b2) * g * g;
                        *w = *w - step * *mi / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
