use std::collections::BTreeMap;

use super::model::ModelParams;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments, one state buffer per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters missing from `grads` are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != n {
                    return Err(Error::Dimension {
                        op: "adam",
                        lhs: vec![n],
                        rhs: vec![g.len()],
                    });
                }
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
