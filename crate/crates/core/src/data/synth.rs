//! Synthetic distant-supervision corpora with planted relation cues.
//!
//! Relation `r` owns `cue_patterns` fixed token sequences of length
//! `cue_len`. Every sentence of a bag carries one pattern for each of the
//! bag's relations at a random place, the two entity tokens, and filler
//! words. NA bags carry no cues. With `noise_rate > 0`, sentences after the
//! first in a labeled bag may drop their cues while keeping the bag's labels,
//! mimicking wrongly aligned sentences.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, RelationMap};
use crate::error::{Error, Result};
use crate::features::{BagKey, Instance, RelationId, Vocab, NA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Relations besides NA.
    pub relations: usize,
    pub cue_patterns: usize,
    pub cue_len: usize,
    /// Filler vocabulary size.
    pub filler_words: usize,
    /// Entity inventory size.
    pub entities: usize,
    pub sentence_len: usize,
    pub train_bags: usize,
    pub test_bags: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probability that a labeled bag carries two or more relations.
    pub overlap_rate: f64,
    pub max_labels: usize,
    /// Probability that a bag is NA.
    pub na_rate: f64,
    /// Probability that a non-first sentence of a labeled bag has no cues.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            relations: 5,
            cue_patterns: 2,
            cue_len: 2,
            filler_words: 100,
            entities: 200,
            sentence_len: 12,
            train_bags: 200,
            test_bags: 50,
            min_sentences: 1,
            max_sentences: 3,
            overlap_rate: 0.5,
            max_labels: 2,
            na_rate: 0.0,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.relations == 0 || self.cue_patterns == 0 || self.cue_len == 0 {
            return bad("need at least one relation with one non-empty cue pattern".into());
        }
        if self.filler_words == 0 {
            return bad("filler vocabulary is empty".into());
        }
        for (name, p) in [
            ("overlap_rate", self.overlap_rate),
            ("na_rate", self.na_rate),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.max_labels == 0 || self.max_labels > self.relations {
            return bad(format!("max_labels {} must lie in 1..={}", self.max_labels, self.relations));
        }
        if self.overlap_rate > 0.0 && self.max_labels < 2 {
            return bad("overlap needs max_labels >= 2".into());
        }
        let need = self.max_labels * self.cue_len + 2;
        if self.sentence_len < need {
            return bad(format!(
                "sentence_len {} cannot hold {} cue patterns of length {} and two entities",
                self.sentence_len, self.max_labels, self.cue_len
            ));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad("sentence counts per bag must satisfy 1 <= min <= max".into());
        }
        let pairs = self.entities.saturating_mul(self.entities.saturating_sub(1));
        if pairs < self.train_bags + self.test_bags {
            return bad(format!(
                "{} entities give only {pairs} ordered pairs for {} bags",
                self.entities,
                self.train_bags + self.test_bags
            ));
        }
        Ok(())
    }

    pub fn relation_name(r: RelationId) -> String {
        format!("/synth/r{r}")
    }

    /// Cue token `k` of pattern `p` of relation `r`.
    pub fn cue_token(r: RelationId, p: usize, k: usize) -> String {
        format!("c{r}_{p}_{k}")
    }
}

enum Unit {
    Head,
    Tail,
    Cue(RelationId, usize),
    Filler,
}

struct Builder<'a> {
    spec: &'a SynthSpec,
    vocab: Vocab,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn sentence(&mut self, key: &BagKey, relations: &[RelationId], cues: bool) -> Result<Instance> {
        let spec = self.spec;
        let mut units = vec![Unit::Head, Unit::Tail];
        let mut used = 2;
        if cues {
            for &r in relations {
                units.push(Unit::Cue(r, self.rng.gen_range(0..spec.cue_patterns)));
                used += spec.cue_len;
            }
        }
        units.extend((used..spec.sentence_len).map(|_| Unit::Filler));
        units.shuffle(&mut self.rng);

        let mut ids = Vec::with_capacity(spec.sentence_len);
        let (mut e1, mut e2) = (0, 0);
        for unit in units {
            match unit {
                Unit::Head => {
                    e1 = ids.len();
                    ids.push(self.vocab.insert(&key.head));
                }
                Unit::Tail => {
                    e2 = ids.len();
                    ids.push(self.vocab.insert(&key.tail));
                }
                Unit::Cue(r, p) => {
                    for k in 0..spec.cue_len {
                        ids.push(self.vocab.insert(&SynthSpec::cue_token(r, p, k)));
                    }
                }
                Unit::Filler => {
                    let w = self.rng.gen_range(0..spec.filler_words);
                    ids.push(self.vocab.insert(&format!("w{w}")));
                }
            }
        }
        let labels: BTreeSet<RelationId> = if relations.is_empty() {
            BTreeSet::from([NA])
        } else {
            relations.iter().copied().collect()
        };
        Instance::new(ids, e1, e2, labels, key.clone())
    }

    fn bag(&mut self, key: &BagKey, out: &mut Vec<Instance>) -> Result<()> {
        let spec = self.spec;
        let relations: Vec<RelationId> = if self.rng.gen_bool(spec.na_rate) {
            Vec::new()
        } else {
            let k = if spec.max_labels >= 2 && self.rng.gen_bool(spec.overlap_rate) {
                self.rng.gen_range(2..=spec.max_labels)
            } else {
                1
            };
            let all: Vec<RelationId> = (1..=spec.relations).collect();
            let mut pick: Vec<RelationId> = all.choose_multiple(&mut self.rng, k).copied().collect();
            pick.sort_unstable();
            pick
        };
        let n = self.rng.gen_range(spec.min_sentences..=spec.max_sentences);
        for s in 0..n {
            let cues = s == 0 || relations.is_empty() || !self.rng.gen_bool(spec.noise_rate);
            out.push(self.sentence(key, &relations, cues)?);
        }
        Ok(())
    }
}

/// Generates a corpus whose test entity pairs never occur in training.
/// Identical specs give identical corpora.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_bags + spec.test_bags;
    let mut seen = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    while pairs.len() < total {
        let h = rng.gen_range(0..spec.entities);
        let t = rng.gen_range(0..spec.entities);
        if h != t && seen.insert((h, t)) {
            pairs.push(BagKey::new(format!("e{h}"), format!("e{t}")));
        }
    }

    let mut relations = RelationMap::new();
    for r in 1..=spec.relations {
        relations.insert(&SynthSpec::relation_name(r));
    }
    let mut b = Builder {
        spec,
        vocab: Vocab::new(),
        rng,
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, key) in pairs.iter().enumerate() {
        let out = if i < spec.train_bags { &mut train } else { &mut test };
        b.bag(key, out)?;
    }
    Ok(Corpus {
        vocab: b.vocab,
        relations,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bags;

    fn words(inst: &Instance, vocab: &Vocab) -> Vec<String> {
        inst.token_ids.iter().map(|&t| vocab.token(t).unwrap().to_string()).collect()
    }

    /// Relations whose cue patterns occur in full in the sentence.
    fn planted(words: &[String], spec: &SynthSpec) -> BTreeSet<RelationId> {
        let mut found = BTreeSet::new();
        for r in 1..=spec.relations {
            for p in 0..spec.cue_patterns {
                let pat: Vec<String> = (0..spec.cue_len).map(|k| SynthSpec::cue_token(r, p, k)).collect();
                if words.windows(spec.cue_len).any(|w| w == pat.as_slice()) {
                    found.insert(r);
                }
            }
        }
        found
    }

    #[test]
    fn no_overlap_means_single_labels() {
        let spec = SynthSpec {
            overlap_rate: 0.0,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        for bag in bags(&c.train).values().chain(bags(&c.test).values()) {
            assert_eq!(bag.labels.len(), 1);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(generate(&spec).unwrap().train, other.train);
    }

    #[test]
    fn overlap_fraction_matches_rate() {
        let spec = SynthSpec {
            relations: 5,
            train_bags: 200,
            test_bags: 0,
            overlap_rate: 0.5,
            seed: 17,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        let b = bags(&c.train);
        assert_eq!(b.len(), 200);
        let multi = b.values().filter(|bag| bag.labels.len() >= 2).count() as f64 / 200.0;
        assert!((multi - 0.5).abs() <= 0.08, "{multi}");
    }

    #[test]
    fn planted_cues_and_disjoint_pairs() {
        let spec = SynthSpec {
            na_rate: 0.2,
            noise_rate: 0.3,
            max_labels: 3,
            sentence_len: 10,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        c.validate().unwrap();
        let train = bags(&c.train);
        let test = bags(&c.test);
        assert_eq!(train.values().map(|b| b.instances.len()).sum::<usize>(), c.train.len());
        assert_eq!(test.values().map(|b| b.instances.len()).sum::<usize>(), c.test.len());
        assert!(train.keys().all(|k| !test.contains_key(k)));
        for (split, grouped) in [(&c.train, &train), (&c.test, &test)] {
            for bag in grouped.values() {
                let mut seen = BTreeSet::new();
                for &i in &bag.instances {
                    let inst = &split[i];
                    assert_eq!(inst.len(), spec.sentence_len);
                    let w = words(inst, &c.vocab);
                    assert_eq!(w[inst.ent1_pos], inst.bag_key.head);
                    assert_eq!(w[inst.ent2_pos], inst.bag_key.tail);
                    seen.extend(planted(&w, &spec));
                }
                if bag.labels.contains(&NA) {
                    assert!(seen.is_empty());
                } else {
                    assert_eq!(seen, bag.labels);
                }
            }
        }
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let short = SynthSpec {
            sentence_len: 5,
            cue_len: 2,
            max_labels: 2,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&short), Err(Error::Config(_))));
        let crowded = SynthSpec {
            entities: 3,
            ..SynthSpec::default()
        };
        assert!(generate(&crowded).is_err());
        assert!(generate(&SynthSpec { overlap_rate: 1.5, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let spec = SynthSpec {
            train_bags: 30,
            test_bags: 10,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let (back, train_report, test_report) = Corpus::load_dir(dir.path(), 100).unwrap();
        assert_eq!(train_report.rejected() + test_report.rejected(), 0);
        assert_eq!(back.relations, c.relations);
        assert_eq!(back.train.len(), c.train.len());
        assert_eq!(back.test.len(), c.test.len());
        for (a, b) in c.train.iter().chain(&c.test).zip(back.train.iter().chain(&back.test)) {
            assert_eq!(words(a, &c.vocab), words(b, &back.vocab));
            assert_eq!((a.ent1_pos, a.ent2_pos, &a.labels, &a.bag_key), (b.ent1_pos, b.ent2_pos, &b.labels, &b.bag_key));
        }
    }
}
