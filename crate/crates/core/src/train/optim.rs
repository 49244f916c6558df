use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    moments: Vec<Option<(ArrayD<T>, ArrayD<T>)>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. Every gradient must be finite and belong to a
    /// trainable parameter; frozen parameters are never written.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = params.get(id);
            if !p.trainable {
                return Err(Error::Config(format!(
                    "gradient supplied for frozen parameter {}",
                    p.name
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    params.get_mut(id).value.scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.len() < params.len() {
                    self.moments.resize(params.len(), None);
                }
                let c1 = T::of(1.0 - beta1.powi(self.step));
                let c2 = T::of(1.0 - beta2.powi(self.step));
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let one = T::one();
                for (id, g) in grads.iter() {
                    let (m, v) = self.moments[id.index()]
                        .get_or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
                    Zip::from(&mut params.get_mut(id).value)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *p -= lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}
