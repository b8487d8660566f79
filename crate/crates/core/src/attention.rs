//! Relation-query multi-head attention followed by a position-free FFN.
//!
//! The query is a single vector built from the two entity states, so every
//! head attends once over the sentence and yields one `d/n`-wide vector.
//! Those per-head vectors are what the capsule layer later treats as
//! low-level capsule material.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Divisor applied to query-key energies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyScale {
    /// `sqrt(d)`, the model width
    #[default]
    SqrtModel,
    /// `sqrt(d / n)`, the per-head width
    SqrtHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d x d`; absent when a learned constant query replaces the relation query
    pub w_q: Option<Tensor>,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `d x d`
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    /// `d x d'`
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-bound..=bound))
}

impl AttentionParams {
    pub fn random(rng: &mut impl Rng, d: usize, d_ff: usize, relation_query: bool) -> Self {
        Self {
            w_q: relation_query.then(|| glorot(rng, d, d)),
            w_k: glorot(rng, d, d),
            w_v: glorot(rng, d, d),
            w_o: glorot(rng, d, d),
            ffn_w1: glorot(rng, d, d),
            ffn_b1: Tensor::zeros(&[1, d]),
            ffn_w2: glorot(rng, d, d_ff),
            ffn_b2: Tensor::zeros(&[1, d_ff]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub energy_scale: EnergyScale,
}

/// Graph handles produced by [`multi_head`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `1 x d'`
    pub hr: Var,
    /// `1 x d/n` each
    pub heads: Vec<Var>,
    /// `1 x l` probability vector per head
    pub weights: Vec<Var>,
}

/// `(h_en1 - h_en2) W_q` as a `1 x d` row.
pub fn relation_query(g: &mut Graph, h: Var, en1: usize, en2: usize, w_q: Var) -> Result<Var> {
    if en1 == en2 {
        return Err(Error::contract("relation query needs two distinct entity positions"));
    }
    let a = g.row(h, en1)?;
    let b = g.row(h, en2)?;
    let diff = g.sub(a, b)?;
    g.matmul(diff, w_q)
}

/// Attends over the rows of `h` with one query vector and `n` heads, then
/// applies the output projection and the FFN.
pub fn multi_head(
    g: &mut Graph,
    h: Var,
    q: Var,
    params: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let d = g.shape(params.w_k)[0];
    let n = cfg.heads;
    if n == 0 || !d.is_multiple_of(n) {
        return Err(Error::config(format!("width {d} not divisible by {n} heads")));
    }
    if g.shape(q) != [1, d] {
        return Err(Error::Dimension {
            op: "multi_head query",
            lhs: g.shape(q).to_vec(),
            rhs: vec![1, d],
        });
    }
    let dh = d / n;
    let scale = match cfg.energy_scale {
        EnergyScale::SqrtModel => (d as f64).sqrt(),
        EnergyScale::SqrtHead => (dh as f64).sqrt(),
    };

    let k = g.matmul(h, params.w_k)?;
    let v = g.matmul(h, params.w_v)?;
    let mut heads = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let qi = g.slice_cols(q, i * dh, dh)?;
        let ki = g.slice_cols(k, i * dh, dh)?;
        let vi = g.slice_cols(v, i * dh, dh)?;
        let kt = g.transpose(ki)?;
        let energy = g.matmul(qi, kt)?;
        let energy = g.scale(energy, 1.0 / scale);
        let w = g.softmax(energy, 1)?;
        heads.push(g.matmul(w, vi)?);
        weights.push(w);
    }
    let cat = g.concat(&heads, 1)?;
    let em = g.matmul(cat, params.w_o)?;
    let hidden = g.matmul(em, params.ffn_w1)?;
    let hidden = g.add(hidden, params.ffn_b1)?;
    let hidden = g.relu(hidden);
    let hr = g.matmul(hidden, params.ffn_w2)?;
    let hr = g.add(hr, params.ffn_b2)?;
    Ok(AttentionOutput { hr, heads, weights })
}
