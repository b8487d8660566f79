//! NYT-style corpus files.
//!
//! One instance per line, six tab-separated fields:
//!
//! ```text
//! ent1_id  ent2_id  ent1_str  ent2_str  relation_name  sentence
//! ```
//!
//! The sentence is whitespace-tokenized; a trailing `###END###` token is
//! dropped if present. Entity strings may span several words (separated by
//! spaces or underscores); their first occurrence in the sentence, either as
//! a run of words or as the already joined token, is replaced by one token
//! joined with `_`. Consecutive lines for the same pair and sentence are read
//! as one instance carrying every listed relation.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{RelationMap, Split};
use crate::error::{Error, Result};
use crate::features::{BagKey, Instance, Vocab, NA};

const END_MARK: &str = "###END###";

/// Raw fields of one corpus line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NytLine {
    pub head_id: String,
    pub tail_id: String,
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub tokens: Vec<String>,
}

pub fn parse_line(line: &str) -> std::result::Result<NytLine, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, found {}", fields.len()));
    }
    for (i, f) in fields[..5].iter().enumerate() {
        if f.trim().is_empty() {
            return Err(format!("field {} is empty", i + 1));
        }
    }
    let mut tokens: Vec<String> = fields[5].split_whitespace().map(str::to_string).collect();
    if tokens.last().map(String::as_str) == Some(END_MARK) {
        tokens.pop();
    }
    Ok(NytLine {
        head_id: fields[0].trim().to_string(),
        tail_id: fields[1].trim().to_string(),
        head: fields[2].trim().to_string(),
        tail: fields[3].trim().to_string(),
        relation: fields[4].trim().to_string(),
        tokens,
    })
}

/// Counts from one call to [`load_nyt`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub instances: usize,
    /// Lines folded into the preceding instance as an extra label.
    pub merged: usize,
    /// Sentences cut to the configured length.
    pub truncated: usize,
    pub rejected_missing_entity: usize,
    pub rejected_truncation: usize,
    /// Test lines whose relation was never seen in training; read as NA.
    pub unknown_relations: usize,
}

impl LoadReport {
    pub fn rejected(&self) -> usize {
        self.rejected_missing_entity + self.rejected_truncation
    }
}

fn entity_parts(s: &str) -> Vec<&str> {
    s.split(|c: char| c == '_' || c.is_whitespace()).filter(|p| !p.is_empty()).collect()
}

/// First occurrence of an entity, as `(start, run length)`.
fn find_entity(tokens: &[String], parts: &[&str], joined: &str, skip: Option<usize>) -> Option<(usize, usize)> {
    (0..tokens.len()).filter(|&i| Some(i) != skip).find_map(|i| {
        if tokens[i] == joined {
            return Some((i, 1));
        }
        let run = parts.len();
        if run > 1
            && i + run <= tokens.len()
            && !skip.is_some_and(|s| (i..i + run).contains(&s))
            && tokens[i..i + run].iter().zip(parts).all(|(t, p)| t == p)
        {
            return Some((i, run));
        }
        None
    })
}

fn merge_run(tokens: &mut Vec<String>, start: usize, len: usize, joined: &str) {
    tokens.splice(start..start + len, std::iter::once(joined.to_string()));
}

enum Resolved {
    Ok { tokens: Vec<String>, e1: usize, e2: usize, truncated: bool },
    Missing,
    Truncated,
}

fn resolve(line: &NytLine, max_len: usize) -> Resolved {
    let (p1, p2) = (entity_parts(&line.head), entity_parts(&line.tail));
    if p1.is_empty() || p2.is_empty() {
        return Resolved::Missing;
    }
    let (j1, j2) = (p1.join("_"), p2.join("_"));
    let mut tokens = line.tokens.clone();
    let Some((s1, n1)) = find_entity(&tokens, &p1, &j1, None) else {
        return Resolved::Missing;
    };
    merge_run(&mut tokens, s1, n1, &j1);
    let mut e1 = s1;
    let Some((s2, n2)) = find_entity(&tokens, &p2, &j2, Some(e1)) else {
        return Resolved::Missing;
    };
    merge_run(&mut tokens, s2, n2, &j2);
    if s2 < e1 {
        e1 -= n2 - 1;
    }
    let e2 = s2;
    let mut truncated = false;
    if tokens.len() > max_len {
        if e1 >= max_len || e2 >= max_len {
            return Resolved::Truncated;
        }
        tokens.truncate(max_len);
        truncated = true;
    }
    Resolved::Ok { tokens, e1, e2, truncated }
}

/// Reads one corpus file. Training files extend `relations`; in test files
/// an unseen relation name is read as NA and counted. Both extend `vocab`
/// (rows for test-only words are simply never trained).
pub fn load_nyt(
    path: &Path,
    split: Split,
    vocab: &mut Vocab,
    relations: &mut RelationMap,
    max_len: usize,
) -> Result<(Vec<Instance>, LoadReport)> {
    if max_len < 2 {
        return Err(Error::config("sentence length must be at least 2"));
    }
    let text = fs::read_to_string(path)?;
    let mut report = LoadReport::default();
    let mut out: Vec<Instance> = Vec::new();
    // (head id, tail id, sentence) of the last accepted line
    let mut prev: Option<(String, String, Vec<String>)> = None;

    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let line = parse_line(raw).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        })?;
        let rel = match split {
            Split::Train => relations.insert(&line.relation),
            Split::Test => relations.get(&line.relation).unwrap_or_else(|| {
                report.unknown_relations += 1;
                NA
            }),
        };

        if let Some((h, t, toks)) = &prev {
            if *h == line.head_id && *t == line.tail_id && *toks == line.tokens {
                let last = out.last_mut().expect("previous instance");
                last.labels.insert(rel);
                if last.labels.len() > 1 {
                    last.labels.remove(&NA);
                }
                report.merged += 1;
                continue;
            }
        }

        let (tokens, e1, e2) = match resolve(&line, max_len) {
            Resolved::Ok { tokens, e1, e2, truncated } => {
                report.truncated += usize::from(truncated);
                (tokens, e1, e2)
            }
            Resolved::Missing => {
                report.rejected_missing_entity += 1;
                prev = None;
                continue;
            }
            Resolved::Truncated => {
                report.rejected_truncation += 1;
                prev = None;
                continue;
            }
        };
        let ids = tokens.iter().map(|t| vocab.insert(t)).collect();
        let key = BagKey::new(line.head_id.clone(), line.tail_id.clone());
        out.push(Instance::new(ids, e1, e2, BTreeSet::from([rel]), key)?);
        prev = Some((line.head_id, line.tail_id, line.tokens));
    }
    report.instances = out.len();
    Ok((out, report))
}

/// Writes instances in the line format, one line per label.
pub fn write_nyt(path: &Path, instances: &[Instance], vocab: &Vocab, relations: &RelationMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let word = |id: usize| vocab.token(id).unwrap_or(crate::features::UNK_TOKEN);
    for inst in instances {
        let sentence: Vec<&str> = inst.token_ids.iter().map(|&t| word(t)).collect();
        let sentence = sentence.join(" ");
        for &r in &inst.labels {
            let name = relations
                .name(r)
                .ok_or_else(|| Error::contract(format!("relation {r} has no name")))?;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                inst.bag_key.head,
                inst.bag_key.tail,
                word(inst.token_ids[inst.ent1_pos]),
                word(inst.token_ids[inst.ent2_pos]),
                name,
                sentence
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
