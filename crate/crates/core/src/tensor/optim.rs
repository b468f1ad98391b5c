//! Parameter update rules.

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer over an explicit parameter list. Keeping the list explicit is
/// what enforces phase isolation: a step can only ever touch these entries.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    params: Vec<ParamId>,
    /// Adam first/second moment buffers, aligned with `params`.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => params
                .iter()
                .map(|&id| {
                    let n = store.get(id).len();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind,
            learning_rate,
            params,
            moments,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64, params: Vec<ParamId>, store: &ParamStore) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, params, store)
    }

    pub fn adam(learning_rate: f64, params: Vec<ParamId>, store: &ParamStore) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, params, store)
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Apply one update. Every listed parameter must carry a populated
    /// gradient; gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if store.get(id).grad.is_none() {
                return Err(Error::contract(format!(
                    "optimizer step with missing gradient for {:?}",
                    store.name(id)
                )));
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for &id in &self.params {
                    let p = store.get_mut(id);
                    let grad = p.grad.take().expect("checked above");
                    for (v, g) in p.data_mut().iter_mut().zip(&grad) {
                        *v -= self.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bias1 = 1.0 - self.beta1.powi(t);
                let bias2 = 1.0 - self.beta2.powi(t);
                for (i, &id) in self.params.iter().enumerate() {
                    let p = store.get_mut(id);
                    let grad = p.grad.take().expect("checked above");
                    let (m, v) = &mut self.moments[i];
                    for ((value, g), (mi, vi)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *value -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
