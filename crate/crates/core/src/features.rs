//! Word and position features for one sentence.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Relation ids index a [`crate::data::RelationMap`]; id 0 is NA.
pub type RelationId = usize;
pub const NA: RelationId = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().cloned().zip(0..).collect();
        Self { index, tokens }
    }

    /// Rebuilds a vocabulary from its id-ordered token list (reserved ids first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::contract("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { index, tokens })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK_ID`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }
}

/// Ordered entity pair identifying a bag.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BagKey {
    pub head: String,
    pub tail: String,
}

impl BagKey {
    pub fn new(head: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for BagKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.head, self.tail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub token_ids: Vec<usize>,
    pub ent1_pos: usize,
    pub ent2_pos: usize,
    pub labels: BTreeSet<RelationId>,
    pub bag_key: BagKey,
}

impl Instance {
    pub fn new(
        token_ids: Vec<usize>,
        ent1_pos: usize,
        ent2_pos: usize,
        labels: BTreeSet<RelationId>,
        bag_key: BagKey,
    ) -> Result<Self> {
        let inst = Self {
            token_ids,
            ent1_pos,
            ent2_pos,
            labels,
            bag_key,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.token_ids.len();
        if self.ent1_pos >= l || self.ent2_pos >= l {
            return Err(Error::contract(format!(
                "entity positions ({}, {}) outside sentence of length {l}",
                self.ent1_pos, self.ent2_pos
            )));
        }
        if self.ent1_pos == self.ent2_pos {
            return Err(Error::contract("both entities at the same token"));
        }
        if self.labels.is_empty() {
            return Err(Error::contract("instance without labels"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Relative distance `token - entity`, clipped to `[-max_len, max_len]` and
/// shifted into `0..=2*max_len`.
pub fn position_feature(token_index: usize, entity_index: usize, max_len: usize) -> usize {
    let max = max_len as i64;
    let d = (token_index as i64 - entity_index as i64).clamp(-max, max);
    (d + max) as usize
}

pub fn position_table_rows(max_len: usize) -> usize {
    2 * max_len + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub word: Tensor,
    pub pos1: Tensor,
    pub pos2: Tensor,
}

impl EmbeddingTables {
    /// Uniform in `[-0.1, 0.1]`.
    pub fn random(rng: &mut impl Rng, vocab: usize, k: usize, p: usize, pos_clip: usize) -> Self {
        let mut table = |rows: usize, cols: usize| Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-0.1..=0.1));
        let rows = position_table_rows(pos_clip);
        Self {
            word: table(vocab, k),
            pos1: table(rows, p),
            pos2: table(rows, p),
        }
    }

    pub fn validate(&self, k: usize, p: usize) -> Result<()> {
        let ok = self.word.shape().len() == 2
            && self.word.shape()[1] == k
            && self.pos1.shape().len() == 2
            && self.pos1.shape()[1] == p
            && self.pos2.shape() == self.pos1.shape();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "embedding tables {:?}/{:?}/{:?} do not match k={k}, p={p}",
                self.word.shape(),
                self.pos1.shape(),
                self.pos2.shape()
            )))
        }
    }

    pub fn bind(&self, g: &mut Graph) -> EmbeddingVars {
        EmbeddingVars {
            word: g.leaf(&self.word),
            pos1: g.leaf(&self.pos1),
            pos2: g.leaf(&self.pos2),
        }
    }
}

/// Embedding tables as nodes of a graph.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub word: Var,
    pub pos1: Var,
    pub pos2: Var,
}

/// `l x (k + 2p)` matrix whose row `j` is `[word_j; pos1_j; pos2_j]`.
///
/// Token ids outside the word table fall back to [`UNK_ID`]; position ids
/// are clipped to the table so they can never be out of range.
pub fn embed(g: &mut Graph, instance: &Instance, tables: &EmbeddingVars) -> Result<Var> {
    if instance.is_empty() {
        return Err(Error::contract("cannot embed an empty sentence"));
    }
    let vocab_rows = g.shape(tables.word)[0];
    let pos_rows = g.shape(tables.pos1)[0];
    if pos_rows.is_multiple_of(2) {
        return Err(Error::config("position table must have 2*max_len+1 rows"));
    }
    let clip = (pos_rows - 1) / 2;
    let words: Vec<usize> = instance
        .token_ids
        .iter()
        .map(|&id| if id < vocab_rows { id } else { UNK_ID })
        .collect();
    let (p1, p2): (Vec<usize>, Vec<usize>) = (0..instance.len())
        .map(|j| {
            (
                position_feature(j, instance.ent1_pos, clip),
                position_feature(j, instance.ent2_pos, clip),
            )
        })
        .unzip();
    let w = g.gather_rows(tables.word, &words)?;
    let a = g.gather_rows(tables.pos1, &p1)?;
    let b = g.gather_rows(tables.pos2, &p2)?;
    g.concat(&[w, a, b], 1)
}

/// Overwrites word-table rows from a text file of `token v_1 .. v_k` lines.
///
/// A leading `count dim` header line is skipped. Returns how many rows were
/// replaced; tokens missing from the vocabulary are ignored.
pub fn load_pretrained(path: &Path, vocab: &Vocab, word: &mut Tensor) -> Result<usize> {
    let k = word.shape()[1];
    let reader = BufReader::new(File::open(path)?);
    let mut replaced = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if rest.len() != k {
            return Err(parse_err(format!("expected {k} values, found {}", rest.len())));
        }
        let values = rest
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(id) = vocab.get(token) {
            word.data_mut()[id * k..(id + 1) * k].copy_from_slice(&values);
            replaced += 1;
        }
    }
    Ok(replaced)
}
