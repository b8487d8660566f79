//! Per-instance dumps of attention weights and routing coefficients.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::Result;
use crate::features::{Instance, UNK_TOKEN};
use crate::tensor::Graph;

/// One line of `attention.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub bag: String,
    pub index: usize,
    pub tokens: Vec<String>,
    pub ent1: usize,
    pub ent2: usize,
    /// One weight per token for every head.
    pub heads: Vec<Vec<f64>>,
}

/// One line of `routing.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub bag: String,
    pub index: usize,
    /// Relation name of each capsule.
    pub capsules: Vec<String>,
    /// Final coupling coefficients, one row per low-level capsule.
    pub coefficients: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Writes `attention.jsonl` and `routing.jsonl` under `out_dir`, one line
/// per instance. Returns the number of instances written.
pub fn inspect(model: &Model, instances: &[Instance], out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir)?;
    let mut att = BufWriter::new(fs::File::create(out_dir.join("attention.jsonl"))?);
    let mut rt = BufWriter::new(fs::File::create(out_dir.join("routing.jsonl"))?);
    let capsules: Vec<String> = (0..model.capsule_count())
        .map(|j| model.relations.name(model.capsule_relation(j)).unwrap_or("?").to_string())
        .collect();
    for (index, inst) in instances.iter().enumerate() {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, inst)?;
        let bag = inst.bag_key.to_string();
        let a = AttentionRecord {
            bag: bag.clone(),
            index,
            tokens: inst
                .token_ids
                .iter()
                .map(|&t| model.vocab.token(t).unwrap_or(UNK_TOKEN).to_string())
                .collect(),
            ent1: inst.ent1_pos,
            ent2: inst.ent2_pos,
            heads: fwd.attention.iter().map(|&w| g.value(w).to_vec()).collect(),
        };
        let r = RoutingRecord {
            bag,
            index,
            capsules: capsules.clone(),
            coefficients: rows(&fwd.routing.coefficients, fwd.routing.high),
            logits: rows(&fwd.routing.logits, fwd.routing.high),
            norms: g.value(fwd.norms).to_vec(),
        };
        serde_json::to_writer(&mut att, &a)?;
        writeln!(att)?;
        serde_json::to_writer(&mut rt, &r)?;
        writeln!(rt)?;
    }
    att.flush()?;
    rt.flush()?;
    Ok(instances.len())
}
