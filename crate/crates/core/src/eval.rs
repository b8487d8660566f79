//! Held-out evaluation: bag scores, precision-recall curve and P@N.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::bags;
use crate::error::{Error, Result};
use crate::features::{BagKey, Instance, RelationId, NA};

/// Anything that maps an instance to one score per relation id (index 0, NA,
/// is ignored).
pub trait RelationScorer: Sync {
    fn relation_scores(&self, instance: &Instance) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bag_key: BagKey,
    pub relation: RelationId,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// One prediction per (bag, non-NA relation), aggregating instance scores.
pub fn score_bags(scorer: &dyn RelationScorer, instances: &[Instance], agg: Aggregation) -> Result<Vec<Prediction>> {
    let scores: Vec<Vec<f64>> = instances
        .par_iter()
        .map(|inst| scorer.relation_scores(inst))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (key, bag) in bags(instances) {
        let m = scores[bag.instances[0]].len();
        for r in (0..m).filter(|&r| r != NA) {
            let vals = bag.instances.iter().map(|&i| scores[i][r]);
            let score = match agg {
                Aggregation::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => vals.sum::<f64>() / bag.instances.len() as f64,
            };
            out.push(Prediction {
                bag_key: key.clone(),
                relation: r,
                score,
            });
        }
    }
    Ok(out)
}

/// Non-NA (bag, relation) facts of a split.
pub fn gold_facts(instances: &[Instance]) -> BTreeSet<(BagKey, RelationId)> {
    bags(instances)
        .into_iter()
        .flat_map(|(key, bag)| {
            bag.labels
                .into_iter()
                .filter(|&r| r != NA)
                .map(move |r| (key.clone(), r))
        })
        .collect()
}

/// Score descending, then bag key and relation ascending.
fn ranking(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bag_key.cmp(&b.bag_key))
        .then_with(|| a.relation.cmp(&b.relation))
}

pub fn rank(preds: &[Prediction]) -> Vec<&Prediction> {
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| ranking(a, b));
    sorted
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub area: f64,
}

/// Precision and recall at every prefix of the ranked predictions. The area
/// integrates precision over recall with the trapezoid rule, starting from
/// the empty prefix at (recall 0, precision 0).
pub fn pr_curve(preds: &[Prediction], gold: &BTreeSet<(BagKey, RelationId)>) -> Result<PrCurve> {
    if gold.is_empty() {
        return Err(Error::Metric("no gold positives, recall is undefined".into()));
    }
    let total = gold.len() as f64;
    let mut points = Vec::with_capacity(preds.len());
    let mut tp = 0usize;
    let (mut area, mut prev_p, mut prev_r) = (0.0, 0.0, 0.0);
    for (i, p) in rank(preds).into_iter().enumerate() {
        if gold.contains(&(p.bag_key.clone(), p.relation)) {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / total;
        area += (recall - prev_r) * (precision + prev_p) / 2.0;
        (prev_p, prev_r) = (precision, recall);
        points.push(PrPoint { precision, recall });
    }
    Ok(PrCurve { points, area })
}

/// Fraction of the `n` highest-ranked predictions that are gold facts.
pub fn p_at_n(preds: &[Prediction], gold: &BTreeSet<(BagKey, RelationId)>, n: usize) -> Result<f64> {
    if n == 0 || n > preds.len() {
        return Err(Error::Metric(format!("P@{n} needs 1..={} predictions", preds.len())));
    }
    let hits = rank(preds)
        .into_iter()
        .take(n)
        .filter(|p| gold.contains(&(p.bag_key.clone(), p.relation)))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Scores every relation by its share of training bags, the same for all
/// instances. Used as the no-information baseline.
pub struct PriorScorer {
    priors: Vec<f64>,
}

impl PriorScorer {
    pub fn fit(train: &[Instance], relations: usize) -> Self {
        let grouped = bags(train);
        let mut counts = vec![0.0; relations];
        for bag in grouped.values() {
            for &r in &bag.labels {
                counts[r] += 1.0;
            }
        }
        let n = grouped.len().max(1) as f64;
        Self {
            priors: counts.into_iter().map(|c| c / n).collect(),
        }
    }
}

impl RelationScorer for PriorScorer {
    fn relation_scores(&self, _: &Instance) -> Result<Vec<f64>> {
        Ok(self.priors.clone())
    }
}

/// Share of `(predicted, gold)` label-set pairs that agree exactly.
pub fn exact_match_rate<'a>(pairs: impl IntoIterator<Item = (&'a BTreeSet<RelationId>, &'a BTreeSet<RelationId>)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, g) in pairs {
        n += 1;
        hit += usize::from(p == g);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub area: f64,
    /// `"P@100"` → precision, for every requested N that fits.
    pub precision_at: BTreeMap<String, f64>,
    pub predictions: usize,
    pub gold_facts: usize,
    pub aggregation: Aggregation,
}

pub fn summarize(
    preds: &[Prediction],
    gold: &BTreeSet<(BagKey, RelationId)>,
    ns: &[usize],
    aggregation: Aggregation,
) -> Result<(PrCurve, EvalSummary)> {
    let curve = pr_curve(preds, gold)?;
    let mut precision_at = BTreeMap::new();
    for &n in ns.iter().filter(|&&n| n >= 1 && n <= preds.len()) {
        precision_at.insert(format!("P@{n}"), p_at_n(preds, gold, n)?);
    }
    let summary = EvalSummary {
        area: curve.area,
        precision_at,
        predictions: preds.len(),
        gold_facts: gold.len(),
        aggregation,
    };
    Ok((curve, summary))
}

pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{},{}", p.precision, p.recall)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}
