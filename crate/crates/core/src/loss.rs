//! Sliding-margin multi-label loss with a learnable "no relation" threshold.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RelationId;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin half-width around the threshold.
    pub gamma: f64,
    /// Weight of the absent-relation hinge.
    pub lambda: f64,
    /// Weight of the squared parameter norm.
    pub l2: f64,
    /// Starting value of the threshold.
    pub s_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            lambda: 1.0,
            l2: 1e-8,
            s_init: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::config(format!("gamma must lie in (0, 0.5), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::config("lambda and l2 must be nonnegative"));
        }
        let (lo, hi) = self.threshold_bounds();
        if !(lo..=hi).contains(&self.s_init) {
            return Err(Error::config(format!("s_init {} outside [{lo}, {hi}]", self.s_init)));
        }
        Ok(())
    }

    /// Range the threshold is clamped to after each update.
    pub fn threshold_bounds(&self) -> (f64, f64) {
        (self.gamma, 1.0 - self.gamma)
    }

    pub fn clamp_threshold(&self, s: f64) -> f64 {
        let (lo, hi) = self.threshold_bounds();
        s.clamp(lo, hi)
    }
}

/// Indicator row for `labels` over `m` relation capsules.
pub fn label_mask(labels: &BTreeSet<RelationId>, m: usize) -> Result<Vec<f64>> {
    let mut mask = vec![0.0; m];
    for &r in labels {
        *mask
            .get_mut(r)
            .ok_or_else(|| Error::contract(format!("relation {r} has no capsule (m = {m})")))? = 1.0;
    }
    Ok(mask)
}

/// `sum_j Y_j relu(S + gamma - n_j)^2 + lambda (1 - Y_j) relu(n_j - S + gamma)^2`
/// for capsule norms `norms` (`1 x m`) and a scalar threshold `s`.
pub fn margin_loss(g: &mut Graph, norms: Var, mask: &[f64], s: Var, gamma: f64, lambda: f64) -> Result<Var> {
    let m = g.value(norms).len();
    if mask.len() != m {
        return Err(Error::Dimension {
            op: "margin_loss",
            lhs: vec![m],
            rhs: vec![mask.len()],
        });
    }
    let norms = g.reshape(norms, &[1, m])?;
    let upper = g.shift(s, gamma);
    let lower = g.shift(s, -gamma);
    let short = g.sub(upper, norms)?;
    let short = g.relu(short);
    let short = g.mul(short, short)?;
    let over = g.sub(norms, lower)?;
    let over = g.relu(over);
    let over = g.mul(over, over)?;
    let present = g.constant(Tensor::row(mask.to_vec()));
    let absent = g.constant(Tensor::row(mask.iter().map(|y| lambda * (1.0 - y)).collect()));
    let a = g.mul(short, present)?;
    let b = g.mul(over, absent)?;
    let both = g.add(a, b)?;
    Ok(g.sum(both))
}

/// Scalar evaluation of [`margin_loss`].
pub fn margin_loss_value(norms: &[f64], mask: &[f64], s: f64, gamma: f64, lambda: f64) -> f64 {
    norms
        .iter()
        .zip(mask)
        .map(|(&n, &y)| {
            let short = (s + gamma - n).max(0.0);
            let over = (n - s + gamma).max(0.0);
            y * short * short + lambda * (1.0 - y) * over * over
        })
        .sum()
}

/// `margin + beta * d + l2 * sum ||theta||^2`, with `theta` the listed
/// parameters (the threshold must not be among them).
pub fn total_loss(g: &mut Graph, margin: Var, d: Var, params: &[Var], beta: f64, l2: f64) -> Result<Var> {
    let mut total = margin;
    if beta != 0.0 {
        let term = g.scale(d, beta);
        total = g.add(total, term)?;
    }
    if l2 != 0.0 {
        for &p in params {
            let sq = g.mul(p, p)?;
            let sq = g.sum(sq);
            let term = g.scale(sq, l2);
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Relations whose capsule norm exceeds the threshold. `skip` names a capsule
/// never reported (the NA capsule when present); an empty set means NA.
pub fn predict(norms: &[f64], s: f64, skip: Option<RelationId>) -> BTreeSet<RelationId> {
    norms
        .iter()
        .enumerate()
        .filter(|&(j, &n)| Some(j) != skip && n > s)
        .map(|(j, _)| j)
        .collect()
}
