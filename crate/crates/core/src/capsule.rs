//! Low-level capsules, the squash nonlinearity and routing-by-agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    /// Low-level capsule count (one per attention head).
    pub low: usize,
    /// Low-level capsule width.
    pub low_dim: usize,
    /// Relation capsule width.
    pub high_dim: usize,
    /// Relation capsule count.
    pub high: usize,
    pub routing_iters: usize,
}

impl CapsuleConfig {
    /// Checks the partition of a `ffn_dim`-wide attention output.
    pub fn validate(&self, ffn_dim: usize) -> Result<()> {
        if self.low == 0 || self.low_dim == 0 || self.high == 0 || self.high_dim == 0 {
            return Err(Error::config("capsule counts and widths must be positive"));
        }
        if self.low * self.low_dim != ffn_dim {
            return Err(Error::config(format!(
                "{} capsules of width {} do not partition an output of width {ffn_dim}",
                self.low, self.low_dim
            )));
        }
        if self.routing_iters == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        Ok(())
    }
}

/// `(|v|^2 / (1 + |v|^2)) * v / |v|`, written as `v * |v| / (1 + |v|^2)` so the
/// zero vector maps to itself without a division by zero.
pub fn squash(g: &mut Graph, v: Var) -> Result<Var> {
    let r = g.l2_norm(v);
    let r2 = g.mul(r, r)?;
    let denom = g.shift(r2, 1.0);
    let factor = g.div(r, denom)?;
    g.mul(v, factor)
}

pub fn squash_values(v: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(v.to_vec()));
    let y = squash(&mut g, x).expect("scalar broadcast");
    g.value(y).to_vec()
}

/// Splits `hr` (`1 x t*d_u`) into `t` contiguous slices and squashes each.
pub fn form_low_capsules(g: &mut Graph, hr: Var, count: usize, width: usize) -> Result<Vec<Var>> {
    let total = g.value(hr).len();
    if count == 0 || count * width != total {
        return Err(Error::config(format!(
            "{count} capsules of width {width} do not partition width {total}"
        )));
    }
    let flat = g.reshape(hr, &[1, total])?;
    (0..count)
        .map(|k| {
            let slice = g.slice_cols(flat, k * width, width)?;
            squash(g, slice)
        })
        .collect()
}

/// Values recorded during one routing pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub low: usize,
    pub high: usize,
    pub high_dim: usize,
    /// Final logits, `low x high` row-major.
    pub logits: Vec<f64>,
    /// Final coupling coefficients, `low x high` row-major.
    pub coefficients: Vec<f64>,
    /// Coupling coefficients used at each iteration.
    pub history: Vec<Vec<f64>>,
    /// Prediction vectors `u_hat[i][j]`, `low x high x high_dim` row-major.
    pub predictions: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RoutingOutput {
    /// `1 x d_r` each
    pub capsules: Vec<Var>,
    pub state: RoutingState,
}

/// Routing-by-agreement from `u.len()` low-level capsules to `w_h.len()`
/// relation capsules.
///
/// Predictions `u_hat[j|i] = u_i W_j` are computed once; logits start at
/// zero; each iteration sets `c_i = softmax_j(b_i)`, `s_j = sum_i c_ij
/// u_hat[j|i]`, `r_j = squash(s_j)` and, except after the last iteration,
/// adds the agreement `u_hat[j|i] . r_j` to `b_ij`. The loop is unrolled on
/// the tape so gradients flow through the coefficients.
pub fn dynamic_routing(g: &mut Graph, u: &[Var], w_h: &[Var], iters: usize) -> Result<RoutingOutput> {
    if u.is_empty() || w_h.is_empty() {
        return Err(Error::contract("routing needs at least one capsule on each side"));
    }
    if iters == 0 {
        return Err(Error::config("routing needs at least one iteration"));
    }
    let (t, m) = (u.len(), w_h.len());
    let low_dim = g.value(u[0]).len();
    let high_dim = g.shape(w_h[0])[1];
    for &w in w_h {
        if g.shape(w) != [low_dim, high_dim] {
            return Err(Error::Dimension {
                op: "routing weights",
                lhs: g.shape(w).to_vec(),
                rhs: vec![low_dim, high_dim],
            });
        }
    }
    let rows = u
        .iter()
        .map(|&v| g.reshape(v, &[1, low_dim]))
        .collect::<Result<Vec<_>>>()?;
    let u_mat = g.concat(&rows, 0)?;
    let predictions = w_h
        .iter()
        .map(|&w| g.matmul(u_mat, w))
        .collect::<Result<Vec<_>>>()?;

    let mut logits = g.constant(Tensor::zeros(&[t, m]));
    let mut history = Vec::with_capacity(iters);
    let mut capsules = Vec::new();
    let mut coeffs = logits;
    for it in 0..iters {
        coeffs = g.softmax(logits, 1)?;
        history.push(g.value(coeffs).to_vec());
        capsules.clear();
        for (j, &pred) in predictions.iter().enumerate() {
            let cj = g.slice_cols(coeffs, j, 1)?;
            let cjt = g.transpose(cj)?;
            let s = g.matmul(cjt, pred)?;
            capsules.push(squash(g, s)?);
        }
        if it + 1 < iters {
            let mut agreement = Vec::with_capacity(m);
            for (&pred, &r) in predictions.iter().zip(&capsules) {
                let rt = g.transpose(r)?;
                agreement.push(g.matmul(pred, rt)?);
            }
            let delta = g.concat(&agreement, 1)?;
            logits = g.add(logits, delta)?;
        }
    }

    let mut flat_pred = Vec::with_capacity(t * m * high_dim);
    for i in 0..t {
        for &pred in &predictions {
            flat_pred.extend_from_slice(&g.value(pred)[i * high_dim..(i + 1) * high_dim]);
        }
    }
    let state = RoutingState {
        low: t,
        high: m,
        high_dim,
        logits: g.value(logits).to_vec(),
        coefficients: g.value(coeffs).to_vec(),
        history,
        predictions: flat_pred,
    };
    Ok(RoutingOutput { capsules, state })
}
