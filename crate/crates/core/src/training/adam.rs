use std::collections::{BTreeMap, BTreeSet};

use seqsleep_autodiff::Tensor;

use super::TrainingError;
use crate::model::ModelParams;

/// Adam moments for the trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, trainable: &BTreeSet<String>) -> Result<Self, TrainingError> {
        let mut m = BTreeMap::new();
        for name in trainable {
            let p = params.get(name)?;
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Ok(Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m })
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    /// One bias-corrected Adam update. `grads` must hold exactly the
    /// trainable parameters; parameters outside that set are never touched.
    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), TrainingError> {
        if let Some(name) = grads.keys().find(|k| !self.m.contains_key(*k)) {
            return Err(TrainingError::FrozenGradient(name.clone()));
        }
        if let Some(name) = self.m.keys().find(|k| !grads.contains_key(*k)) {
            return Err(TrainingError::MissingGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .tensors
                .get_mut(name)
                .ok_or_else(|| TrainingError::MissingGradient(name.clone()))?;
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            if g.shape() != p.shape() {
                return Err(TrainingError::Shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
