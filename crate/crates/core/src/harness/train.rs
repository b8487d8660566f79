use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::save_checkpoint;
use super::model::{Binding, Model, ModelParams, ParamGrad, THRESHOLD};
use super::TrainConfig;
use crate::data::{bag_labels, Corpus};
use crate::error::{Error, Result};
use crate::eval::{exact_match_rate, gold_facts, pr_curve, score_bags};
use crate::features::{load_pretrained, RelationId};
use crate::tensor::Graph;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `margin + beta * disagreement + l2_penalty`
    pub loss: f64,
    /// Mean margin loss per instance.
    pub margin: f64,
    /// Mean disagreement per instance, before weighting.
    pub disagreement: f64,
    /// Mean over steps of `beta' * sum ||theta||^2`.
    pub l2_penalty: f64,
    pub threshold: f64,
    pub train_exact_match: Option<f64>,
    pub heldout_auc: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters at the epoch with the best held-out PR area.
    pub best: Option<(usize, f64, Model)>,
    pub metrics: Vec<EpochMetrics>,
}

struct MemberResult {
    total: f64,
    margin: f64,
    disagreement: f64,
    grads: Vec<ParamGrad>,
}

/// Stream offset separating dropout draws from initialization and shuffling.
const DROPOUT_SEED: u64 = 0x5eed_d50f;

/// Predicted relation sets for every instance.
fn predictions(model: &Model, corpus_split: &[crate::features::Instance]) -> Result<Vec<BTreeSet<RelationId>>> {
    corpus_split.par_iter().map(|inst| model.predict(inst)).collect()
}

/// Share of training instances whose predicted set equals their bag's label set.
pub fn train_exact_match(model: &Model, corpus: &Corpus) -> Result<f64> {
    let preds = predictions(model, &corpus.train)?;
    let gold = bag_labels(&corpus.train);
    Ok(exact_match_rate(preds.iter().zip(&gold)))
}

/// Trains a fresh model on `corpus.train`, evaluating on `corpus.test` after
/// every epoch. With `out_dir`, writes `metrics.jsonl`, `model.ckpt` (last
/// epoch) and `best.ckpt` (best held-out PR area).
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(
        cfg.model.clone(),
        corpus.vocab.clone(),
        corpus.relations.clone(),
        &mut init,
        cfg.loss.s_init,
    )?;
    if let Some(path) = &cfg.pretrained {
        let word = model.params.get_mut(super::model::WORD).expect("word table");
        let n = load_pretrained(path, &corpus.vocab, word)?;
        log::info!("copied {n} pretrained word vectors");
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);
    let labels = bag_labels(&corpus.train);
    let gold = gold_facts(&corpus.test);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;

    let mut metrics_out = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut opt = Adam::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut margin_sum, mut d_sum, mut l2_sum) = (0.0, 0.0, 0.0);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<MemberResult> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let inst = &corpus.train[i];
                        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED);
                        drop_rng.set_stream(step * cfg.batch_size as u64 + k as u64);
                        let mut g = Graph::new();
                        let fwd = model.forward_with(&mut g, inst, Binding::Train, Some((&mut drop_rng, cfg.dropout)))?;
                        let parts = model.objective(&mut g, &fwd, &labels[i], &cfg.loss, &cfg.disagreement, false)?;
                        g.backward(parts.total)?;
                        Ok(MemberResult {
                            total: g.scalar(parts.total),
                            margin: parts.margin,
                            disagreement: parts.disagreement,
                            grads: model.gradients(&g, &fwd),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;

            let n = batch.len() as f64;
            let l2 = cfg.loss.l2 * model.params.l2_sum();
            let batch_loss = results.iter().map(|r| r.total).sum::<f64>() / n + l2;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_no,
                    bag: corpus.train[batch[0]].bag_key.to_string(),
                    value: batch_loss,
                });
            }
            let mut grads: BTreeMap<String, Vec<f64>> =
                model.params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
            for r in &results {
                margin_sum += r.margin;
                d_sum += r.disagreement;
                for pg in &r.grads {
                    let buf = grads.get_mut(&pg.name).expect("known parameter");
                    match &pg.rows {
                        None => buf.iter_mut().zip(&pg.values).for_each(|(b, v)| *b += v),
                        Some(rows) => {
                            let k = pg.values.len() / rows.len();
                            for (local, &row) in rows.iter().enumerate() {
                                let dst = &mut buf[row * k..(row + 1) * k];
                                dst.iter_mut().zip(&pg.values[local * k..(local + 1) * k]).for_each(|(b, v)| *b += v);
                            }
                        }
                    }
                }
            }
            l2_sum += l2 * n;
            for (name, buf) in grads.iter_mut() {
                let t = model.params.get(name).expect("known parameter");
                let reg = cfg.loss.l2 != 0.0 && ModelParams::is_regularized(name);
                for (b, &x) in buf.iter_mut().zip(t.data()) {
                    *b /= n;
                    if reg {
                        *b += 2.0 * cfg.loss.l2 * x;
                    }
                }
            }
            opt.step(&mut model.params, &grads, cfg.lr)?;
            let s = model.params.get_mut(THRESHOLD).expect("threshold");
            s.data_mut()[0] = cfg.loss.clamp_threshold(s.data()[0]);
            step += 1;
        }

        let count = corpus.train.len() as f64;
        let (margin, disagreement, l2_penalty) = (margin_sum / count, d_sum / count, l2_sum / count);
        let train_match = if cfg.log_train_match || cfg.stop_at_train_match.is_some() {
            Some(train_exact_match(&model, corpus)?)
        } else {
            None
        };
        let heldout_auc = if gold.is_empty() || corpus.test.is_empty() {
            None
        } else {
            let preds = score_bags(&model, &corpus.test, cfg.aggregation)?;
            Some(pr_curve(&preds, &gold)?.area)
        };
        let m = EpochMetrics {
            epoch,
            loss: margin + cfg.disagreement.beta * disagreement + l2_penalty,
            margin,
            disagreement,
            l2_penalty,
            threshold: model.threshold(),
            train_exact_match: train_match,
            heldout_auc,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} margin {:.6} D {:.4} S {:.4} match {:?} auc {:?}",
            m.loss,
            m.margin,
            m.disagreement,
            m.threshold,
            m.train_exact_match,
            m.heldout_auc
        );
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            writeln!(w)?;
            w.flush()?;
        }
        if let Some(auc) = heldout_auc {
            if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), &model)?;
                }
                best = Some((epoch, auc, model.clone()));
            }
        }
        let stop = matches!((cfg.stop_at_train_match, train_match), (Some(t), Some(v)) if v >= t);
        metrics.push(m);
        if stop {
            break;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.ckpt"), &model)?;
    }
    Ok(TrainOutcome { model, best, metrics })
}
