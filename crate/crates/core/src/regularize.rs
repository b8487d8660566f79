//! Disagreement regularization: average pairwise cosine similarity among
//! attention heads and among low-level capsules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisagreementConfig {
    pub enable_head: bool,
    pub enable_capsule: bool,
    /// Weight of the term in the training loss; must be nonnegative.
    pub beta: f64,
    /// Average over the `m(m-1)` off-diagonal pairs instead of all `m^2`.
    pub exclude_diagonal: bool,
}

impl Default for DisagreementConfig {
    fn default() -> Self {
        Self {
            enable_head: true,
            enable_capsule: true,
            beta: 0.001,
            exclude_diagonal: false,
        }
    }
}

impl DisagreementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("disagreement weight must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Mean cosine similarity over ordered pairs of `vectors`.
///
/// With `exclude_diagonal == false` the sum runs over all `m^2` pairs,
/// diagonal included. A zero vector has cosine 0 with everything, itself
/// included.
pub fn avg_pairwise_cosine_var(g: &mut Graph, vectors: &[Var], exclude_diagonal: bool) -> Result<Var> {
    let m = vectors.len();
    if m == 0 {
        return Err(Error::contract("pairwise cosine of zero vectors"));
    }
    let mut rows = Vec::with_capacity(m);
    for &v in vectors {
        let numel = g.value(v).len();
        rows.push(g.reshape(v, &[1, numel])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let cos = g.row_cosine(stacked)?;
    let total = g.sum(cos);
    if !exclude_diagonal {
        // divide rather than scale by 1/m^2 so that identical vectors give exactly 1
        let count = g.constant(Tensor::scalar((m * m) as f64));
        return g.div(total, count);
    }
    if m == 1 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let eye = Tensor::from_fn(&[m, m], |k| if k / m == k % m { 1.0 } else { 0.0 });
    let eye = g.constant(eye);
    let diag = g.mul(cos, eye)?;
    let diag = g.sum(diag);
    let off = g.sub(total, diag)?;
    let count = g.constant(Tensor::scalar((m * (m - 1)) as f64));
    g.div(off, count)
}

/// Plain-value form of [`avg_pairwise_cosine_var`] with the diagonal included.
pub fn avg_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    avg_pairwise_cosine_with(vectors, false)
}

pub fn avg_pairwise_cosine_with(vectors: &[Vec<f64>], exclude_diagonal: bool) -> Result<f64> {
    let mut g = Graph::new();
    let vars = vectors
        .iter()
        .map(|v| {
            if v.is_empty() {
                return Err(Error::contract("empty vector"));
            }
            Ok(g.constant(Tensor::vector(v.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = avg_pairwise_cosine_var(&mut g, &vars, exclude_diagonal)?;
    Ok(g.scalar(d))
}

/// Combined disagreement term.
///
/// Averages the head and capsule terms when both are enabled, uses
/// whichever one is enabled otherwise, and is the constant 0 when neither is.
pub fn disagreement(g: &mut Graph, heads: &[Var], capsules: &[Var], cfg: &DisagreementConfig) -> Result<Var> {
    let head = if cfg.enable_head {
        Some(avg_pairwise_cosine_var(g, heads, cfg.exclude_diagonal)?)
    } else {
        None
    };
    let capsule = if cfg.enable_capsule {
        Some(avg_pairwise_cosine_var(g, capsules, cfg.exclude_diagonal)?)
    } else {
        None
    };
    match (head, capsule) {
        (Some(a), Some(b)) => {
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Ok(g.constant(Tensor::scalar(0.0))),
    }
}
