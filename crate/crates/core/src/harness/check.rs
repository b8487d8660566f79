//! Finite-difference check of the full training objective.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{Binding, Model};
use super::TrainConfig;
use crate::data::RelationMap;
use crate::error::Result;
use crate::features::{BagKey, Instance, Vocab};
use crate::gradcheck::{relative_error, GradCheckReport, ParamCheck, FD_STEP};
use crate::tensor::Graph;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

fn objective(model: &Model, inst: &Instance, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = model.forward_with(&mut g, inst, Binding::Full, None)?;
    let parts = model.objective(&mut g, &fwd, &inst.labels, &cfg.loss, &cfg.disagreement, true)?;
    Ok(g.scalar(parts.total))
}

/// Compares backpropagated gradients of margin + disagreement + L2 with
/// central differences for every entry of every parameter (or a random
/// `max_entries` of them per parameter), on one random sentence of length
/// `max_len` with two non-NA relations.
pub fn gradcheck_model(cfg: &TrainConfig, seed: u64, max_entries: Option<usize>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    for i in 0..8 {
        vocab.insert(&format!("w{i}"));
    }
    let mut relations = RelationMap::new();
    relations.insert("/r1");
    relations.insert("/r2");
    let model = Model::new(cfg.model.clone(), vocab, relations, &mut rng, cfg.loss.s_init)?;
    let l = cfg.model.max_len;
    let tokens = (0..l).map(|_| rng.gen_range(0..model.vocab.len())).collect();
    let e1 = rng.gen_range(0..l);
    let e2 = (e1 + rng.gen_range(1..l)) % l;
    let labels = BTreeSet::from([rng.gen_range(1..=2)]);
    let inst = Instance::new(tokens, e1, e2, labels, BagKey::new("h", "t"))?;

    let mut g = Graph::new();
    let fwd = model.forward_with(&mut g, &inst, Binding::Full, None)?;
    let parts = model.objective(&mut g, &fwd, &inst.labels, &cfg.loss, &cfg.disagreement, true)?;
    g.backward(parts.total)?;
    let grads = model.gradients(&g, &fwd);

    let picks: Vec<Option<Vec<usize>>> = grads
        .iter()
        .map(|p| max_entries.filter(|&k| k < p.values.len()).map(|k| sample(&mut rng, p.values.len(), k).into_vec()))
        .collect();

    let params = grads
        .par_iter()
        .zip(picks.par_iter())
        .map(|(pg, pick)| -> Result<ParamCheck> {
            let mut probe = model.clone();
            let entries: Vec<usize> = pick.clone().unwrap_or_else(|| (0..pg.values.len()).collect());
            let (mut worst, mut worst_index) = (0.0f64, 0);
            for &i in &entries {
                let orig = probe.params.get(&pg.name).expect("bound name").data()[i];
                probe.params.get_mut(&pg.name).expect("bound name").data_mut()[i] = orig + FD_STEP;
                let up = objective(&probe, &inst, cfg)?;
                probe.params.get_mut(&pg.name).expect("bound name").data_mut()[i] = orig - FD_STEP;
                let down = objective(&probe, &inst, cfg)?;
                probe.params.get_mut(&pg.name).expect("bound name").data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let err = relative_error(pg.values[i], numeric, GRADCHECK_FLOOR);
                if err > worst || err.is_nan() {
                    worst = if err.is_nan() { f64::INFINITY } else { err };
                    worst_index = i;
                }
            }
            Ok(ParamCheck {
                name: pg.name.clone(),
                entries: entries.len(),
                max_rel_error: worst,
                worst_index,
                passed: worst < GRADCHECK_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        params,
    })
}
