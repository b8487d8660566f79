//! Corpora, relation inventories and bag grouping.

mod nyt;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BagKey, Instance, RelationId, Vocab, NA};

pub use nyt::{load_nyt, parse_line, write_nyt, LoadReport, NytLine};
pub use synth::{generate, SynthSpec};

pub const NA_NAME: &str = "NA";

/// Bidirectional relation name map with `NA` fixed at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMap {
    names: Vec<String>,
    index: HashMap<String, RelationId>,
}

impl Default for RelationMap {
    fn default() -> Self {
        Self::new()
    }
}

impl RelationMap {
    pub fn new() -> Self {
        Self {
            names: vec![NA_NAME.to_string()],
            index: HashMap::from([(NA_NAME.to_string(), NA)]),
        }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NA_NAME) {
            return Err(Error::contract("relation list must start with NA"));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::contract(format!("duplicate relation {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn insert(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<RelationId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: RelationId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Relation count including NA.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() <= 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Train and test instances over one vocabulary and relation inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub relations: RelationMap,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Checks every instance against the vocabulary and relation inventory.
    pub fn validate(&self) -> Result<()> {
        for inst in self.train.iter().chain(&self.test) {
            inst.validate()?;
            if let Some(&r) = inst.labels.iter().find(|&&r| r >= self.relations.len()) {
                return Err(Error::contract(format!("label {r} outside relation inventory")));
            }
            if inst.token_ids.iter().any(|&t| t >= self.vocab.len()) {
                return Err(Error::contract("token id outside vocabulary"));
            }
        }
        Ok(())
    }

    /// Reads `train.txt`, `test.txt` and, when present, `relations.txt`
    /// (one name per line, NA first) from `dir`.
    pub fn load_dir(dir: &Path, max_len: usize) -> Result<(Self, LoadReport, LoadReport)> {
        let mut vocab = Vocab::new();
        let rel_path = dir.join("relations.txt");
        let mut relations = if rel_path.exists() {
            let text = std::fs::read_to_string(&rel_path)?;
            RelationMap::from_names(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())?
        } else {
            RelationMap::new()
        };
        let (train, train_report) = load_nyt(&dir.join("train.txt"), Split::Train, &mut vocab, &mut relations, max_len)?;
        let (test, test_report) = load_nyt(&dir.join("test.txt"), Split::Test, &mut vocab, &mut relations, max_len)?;
        let corpus = Self {
            vocab,
            relations,
            train,
            test,
        };
        Ok((corpus, train_report, test_report))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut names = self.relations.names().join("\n");
        names.push('\n');
        std::fs::write(dir.join("relations.txt"), names)?;
        write_nyt(&dir.join("train.txt"), &self.train, &self.vocab, &self.relations)?;
        write_nyt(&dir.join("test.txt"), &self.test, &self.vocab, &self.relations)?;
        Ok(())
    }
}

/// Instances sharing an entity pair, by index into the source slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub instances: Vec<usize>,
    pub labels: BTreeSet<RelationId>,
}

/// Groups instances by entity pair, keeping their order. A bag's labels are
/// the union over its instances, with NA dropped once a real relation is
/// present.
pub fn bags(instances: &[Instance]) -> BTreeMap<BagKey, Bag> {
    let mut out: BTreeMap<BagKey, Bag> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let bag = out.entry(inst.bag_key.clone()).or_insert_with(|| Bag {
            instances: Vec::new(),
            labels: BTreeSet::new(),
        });
        bag.instances.push(i);
        bag.labels.extend(inst.labels.iter().copied());
    }
    for bag in out.values_mut() {
        if bag.labels.len() > 1 {
            bag.labels.remove(&NA);
        }
    }
    out
}

/// Labels the model is trained against for each instance: its bag's label set.
pub fn bag_labels(instances: &[Instance]) -> Vec<BTreeSet<RelationId>> {
    let grouped = bags(instances);
    instances.iter().map(|inst| grouped[&inst.bag_key].labels.clone()).collect()
}
