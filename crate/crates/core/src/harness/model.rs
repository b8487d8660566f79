use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::{glorot, multi_head, relation_query, AttentionConfig, AttentionParams, AttentionVars};
use crate::capsule::{dynamic_routing, form_low_capsules, RoutingState};
use crate::data::RelationMap;
use crate::encoder::{blstm, LstmParams, LstmVars};
use crate::error::{Error, Result};
use crate::eval::RelationScorer;
use crate::features::{embed, position_table_rows, EmbeddingTables, EmbeddingVars, Instance, RelationId, Vocab, NA, UNK_ID};
use crate::loss::{self, LossConfig};
use crate::regularize::{disagreement, DisagreementConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const WORD: &str = "embed.word";
pub const THRESHOLD: &str = "threshold";
const QUERY_W: &str = "attn.w_q";
const QUERY_CONST: &str = "attn.query";

fn w_h_name(j: usize) -> String {
    format!("caps.w_h.{j}")
}

/// Every learnable array, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Parameter inventory of `cfg` for a vocabulary of `vocab` rows and
    /// `relations` relation ids (NA included).
    pub fn expected_shapes(cfg: &ModelConfig, vocab: usize, relations: usize) -> BTreeMap<String, Vec<usize>> {
        let (d, input) = (cfg.hidden, cfg.word_dim + 2 * cfg.pos_dim);
        let pos_rows = position_table_rows(cfg.max_len);
        let mut s: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        s.insert(WORD.into(), vec![vocab, cfg.word_dim]);
        s.insert("embed.pos1".into(), vec![pos_rows, cfg.pos_dim]);
        s.insert("embed.pos2".into(), vec![pos_rows, cfg.pos_dim]);
        for dir in ["fwd", "bwd"] {
            s.insert(format!("lstm.{dir}.w_x"), vec![input, 4 * d]);
            s.insert(format!("lstm.{dir}.w_h"), vec![d, 4 * d]);
            s.insert(format!("lstm.{dir}.bias"), vec![1, 4 * d]);
        }
        if cfg.relation_query {
            s.insert(QUERY_W.into(), vec![d, d]);
        } else {
            s.insert(QUERY_CONST.into(), vec![1, d]);
        }
        for name in ["attn.w_k", "attn.w_v", "attn.w_o", "ffn.w1"] {
            s.insert(name.into(), vec![d, d]);
        }
        s.insert("ffn.b1".into(), vec![1, d]);
        s.insert("ffn.w2".into(), vec![d, cfg.ffn_dim]);
        s.insert("ffn.b2".into(), vec![1, cfg.ffn_dim]);
        for j in 0..cfg.capsules_for(relations) {
            s.insert(w_h_name(j), vec![cfg.capsule_dim, cfg.relation_dim]);
        }
        s.insert(THRESHOLD.into(), vec![1]);
        s
    }

    pub fn random(rng: &mut impl Rng, cfg: &ModelConfig, vocab: usize, relations: usize, s_init: f64) -> Self {
        let (d, input) = (cfg.hidden, cfg.word_dim + 2 * cfg.pos_dim);
        let mut t = BTreeMap::new();
        let emb = EmbeddingTables::random(rng, vocab, cfg.word_dim, cfg.pos_dim, cfg.max_len);
        t.insert(WORD.to_string(), emb.word);
        t.insert("embed.pos1".to_string(), emb.pos1);
        t.insert("embed.pos2".to_string(), emb.pos2);
        for dir in ["fwd", "bwd"] {
            let p = LstmParams::random(rng, input, d);
            t.insert(format!("lstm.{dir}.w_x"), p.w_x);
            t.insert(format!("lstm.{dir}.w_h"), p.w_h);
            t.insert(format!("lstm.{dir}.bias"), p.bias);
        }
        let a = AttentionParams::random(rng, d, cfg.ffn_dim, cfg.relation_query);
        match a.w_q {
            Some(w) => t.insert(QUERY_W.to_string(), w),
            None => t.insert(QUERY_CONST.to_string(), glorot(rng, 1, d)),
        };
        t.insert("attn.w_k".to_string(), a.w_k);
        t.insert("attn.w_v".to_string(), a.w_v);
        t.insert("attn.w_o".to_string(), a.w_o);
        t.insert("ffn.w1".to_string(), a.ffn_w1);
        t.insert("ffn.b1".to_string(), a.ffn_b1);
        t.insert("ffn.w2".to_string(), a.ffn_w2);
        t.insert("ffn.b2".to_string(), a.ffn_b2);
        for j in 0..cfg.capsules_for(relations) {
            t.insert(w_h_name(j), glorot(rng, cfg.capsule_dim, cfg.relation_dim));
        }
        t.insert(THRESHOLD.to_string(), Tensor::scalar(s_init));
        Self { tensors: t }
    }

    /// Errors unless names and shapes are exactly the inventory of `cfg`.
    pub fn check_inventory(&self, cfg: &ModelConfig, vocab: usize, relations: usize) -> Result<()> {
        let want = Self::expected_shapes(cfg, vocab, relations);
        for (name, shape) in &want {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Whether `name` is covered by the L2 penalty (everything but the threshold).
    pub fn is_regularized(name: &str) -> bool {
        name != THRESHOLD
    }

    /// `sum ||theta||^2` over the regularized parameters.
    pub fn l2_sum(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| Self::is_regularized(n))
            .map(|(_, t)| t.squared_norm())
            .sum()
    }

    fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }
}

/// How parameters enter the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binding {
    /// Untracked constants; only the word rows in use are copied.
    Inference,
    /// Tracked; only the word rows in use are copied.
    Train,
    /// Tracked, whole tables.
    Full,
}

#[derive(Clone, Debug)]
pub(crate) struct Bound {
    vars: Vec<(String, Var)>,
    /// Global word-table row of each local row, when the table is cut.
    word_rows: Option<Vec<usize>>,
}

impl Bound {
    fn var(&self, name: &str) -> Var {
        self.vars.iter().find(|(n, _)| n == name).expect("bound parameter").1
    }
}

/// Gradient of one parameter; `rows` lists the word-table rows covered when
/// only part of the table was bound.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamGrad {
    pub name: String,
    pub rows: Option<Vec<usize>>,
    pub values: Vec<f64>,
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `1 x m` relation capsule lengths
    pub norms: Var,
    pub capsules: Vec<Var>,
    pub low: Vec<Var>,
    pub heads: Vec<Var>,
    /// `1 x l` attention weights per head
    pub attention: Vec<Var>,
    pub routing: RoutingState,
    pub threshold: Var,
    pub(crate) bound: Bound,
}

/// Loss graph node plus the values that make it up.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub margin: f64,
    pub disagreement: f64,
    /// `beta' * sum ||theta||^2` when it is part of the graph, else 0.
    pub l2: f64,
}

/// A network together with the vocabulary and relation inventory it was
/// built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
    pub relations: RelationMap,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, relations: RelationMap, rng: &mut impl Rng, s_init: f64) -> Result<Self> {
        config.validate()?;
        if config.capsules_for(relations.len()) == 0 {
            return Err(Error::config("no relation capsules: the inventory has no relations"));
        }
        let params = ModelParams::random(rng, &config, vocab.len(), relations.len(), s_init);
        Ok(Self {
            config,
            params,
            vocab,
            relations,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams, vocab: Vocab, relations: RelationMap) -> Result<Self> {
        config.validate()?;
        params.check_inventory(&config, vocab.len(), relations.len())?;
        Ok(Self {
            config,
            params,
            vocab,
            relations,
        })
    }

    pub fn capsule_count(&self) -> usize {
        self.config.capsules_for(self.relations.len())
    }

    pub fn threshold(&self) -> f64 {
        self.params.tensor(THRESHOLD).data()[0]
    }

    /// Relation id represented by capsule `j`.
    pub fn capsule_relation(&self, j: usize) -> RelationId {
        if self.config.na_capsule {
            j
        } else {
            j + 1
        }
    }

    fn bind(&self, g: &mut Graph, inst: &Instance, binding: Binding) -> (Bound, Instance) {
        let vocab_rows = self.params.tensor(WORD).shape()[0];
        let global: Vec<usize> = inst
            .token_ids
            .iter()
            .map(|&t| if t < vocab_rows { t } else { UNK_ID })
            .collect();
        let mut local = inst.clone();
        let mut vars = Vec::with_capacity(self.params.len());
        let mut word_rows = None;
        let mut put = |g: &mut Graph, name: &str, t: &Tensor| {
            let v = match binding {
                Binding::Inference => g.constant(t.clone()),
                Binding::Train | Binding::Full => g.param(t),
            };
            vars.push((name.to_string(), v));
        };
        for (name, t) in self.params.iter() {
            if name == WORD && binding != Binding::Full {
                let rows: Vec<usize> = global.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let k = t.shape()[1];
                let mut data = Vec::with_capacity(rows.len() * k);
                for &r in &rows {
                    data.extend_from_slice(&t.data()[r * k..(r + 1) * k]);
                }
                local.token_ids = global.iter().map(|id| rows.binary_search(id).expect("row present")).collect();
                let sub = Tensor::new(vec![rows.len(), k], data).expect("non-empty sentence");
                put(g, name, &sub);
                word_rows = Some(rows);
            } else {
                put(g, name, t);
            }
        }
        if word_rows.is_none() {
            local.token_ids = global;
        }
        (Bound { vars, word_rows }, local)
    }

    pub(crate) fn forward_with(
        &self,
        g: &mut Graph,
        inst: &Instance,
        binding: Binding,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Forward> {
        inst.validate()?;
        if inst.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "sentence of length {} exceeds max_len {}",
                inst.len(),
                self.config.max_len
            )));
        }
        let cfg = &self.config;
        let (bound, local) = self.bind(g, inst, binding);
        let v = |name: &str| bound.var(name);

        let tables = EmbeddingVars {
            word: v(WORD),
            pos1: v("embed.pos1"),
            pos2: v("embed.pos2"),
        };
        let x = embed(g, &local, &tables)?;
        let lstm = |dir: &str| LstmVars {
            w_x: v(&format!("lstm.{dir}.w_x")),
            w_h: v(&format!("lstm.{dir}.w_h")),
            bias: v(&format!("lstm.{dir}.bias")),
        };
        let mut h = blstm(g, x, &lstm("fwd"), &lstm("bwd"))?;
        if let Some((rng, p)) = dropout {
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let shape = g.shape(h).to_vec();
                let mask = Tensor::from_fn(&shape, |_| if rng.gen_bool(p) { 0.0 } else { keep });
                let mask = g.constant(mask);
                h = g.mul(h, mask)?;
            }
        }
        let q = if cfg.relation_query {
            relation_query(g, h, inst.ent1_pos, inst.ent2_pos, v(QUERY_W))?
        } else {
            v(QUERY_CONST)
        };
        let attn_vars = AttentionVars {
            w_k: v("attn.w_k"),
            w_v: v("attn.w_v"),
            w_o: v("attn.w_o"),
            ffn_w1: v("ffn.w1"),
            ffn_b1: v("ffn.b1"),
            ffn_w2: v("ffn.w2"),
            ffn_b2: v("ffn.b2"),
        };
        let attn_cfg = AttentionConfig {
            heads: cfg.heads,
            energy_scale: cfg.energy_scale,
        };
        let att = multi_head(g, h, q, &attn_vars, &attn_cfg)?;
        let low = form_low_capsules(g, att.hr, cfg.heads, cfg.capsule_dim)?;
        let w_h: Vec<Var> = (0..self.capsule_count()).map(|j| v(&w_h_name(j))).collect();
        let routed = dynamic_routing(g, &low, &w_h, cfg.routing_iters)?;
        let norms = routed
            .capsules
            .iter()
            .map(|&c| {
                let n = g.l2_norm(c);
                g.reshape(n, &[1, 1])
            })
            .collect::<Result<Vec<_>>>()?;
        let norms = g.concat(&norms, 1)?;
        let threshold = v(THRESHOLD);
        Ok(Forward {
            norms,
            capsules: routed.capsules,
            low,
            heads: att.heads,
            attention: att.weights,
            routing: routed.state,
            threshold,
            bound,
        })
    }

    /// Inference-mode forward pass (no dropout, nothing tracked).
    pub fn forward(&self, g: &mut Graph, inst: &Instance) -> Result<Forward> {
        self.forward_with(g, inst, Binding::Inference, None)
    }

    /// Margin targets over the capsules for a label set.
    pub fn label_mask(&self, labels: &BTreeSet<RelationId>) -> Result<Vec<f64>> {
        let m = self.capsule_count();
        if self.config.na_capsule {
            loss::label_mask(labels, m)
        } else {
            let shifted = labels.iter().filter(|&&r| r != NA).map(|&r| r - 1).collect();
            loss::label_mask(&shifted, m)
        }
    }

    /// Per-instance objective: margin loss plus the weighted disagreement,
    /// and the weighted L2 penalty when `l2_in_graph` (the training loop adds
    /// that term once per batch instead).
    pub fn objective(
        &self,
        g: &mut Graph,
        fwd: &Forward,
        labels: &BTreeSet<RelationId>,
        loss_cfg: &LossConfig,
        dis_cfg: &DisagreementConfig,
        l2_in_graph: bool,
    ) -> Result<LossParts> {
        let mask = self.label_mask(labels)?;
        let margin = loss::margin_loss(g, fwd.norms, &mask, fwd.threshold, loss_cfg.gamma, loss_cfg.lambda)?;
        let d = disagreement(g, &fwd.heads, &fwd.low, dis_cfg)?;
        let (l2_vars, l2_weight) = if l2_in_graph {
            let vars: Vec<Var> = fwd
                .bound
                .vars
                .iter()
                .filter(|(n, _)| ModelParams::is_regularized(n))
                .map(|&(_, v)| v)
                .collect();
            (vars, loss_cfg.l2)
        } else {
            (Vec::new(), 0.0)
        };
        let total = loss::total_loss(g, margin, d, &l2_vars, dis_cfg.beta, l2_weight)?;
        let l2 = if l2_in_graph {
            loss_cfg.l2 * l2_vars.iter().map(|&v| g.value(v).iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
        } else {
            0.0
        };
        Ok(LossParts {
            total,
            margin: g.scalar(margin),
            disagreement: g.scalar(d),
            l2,
        })
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub(crate) fn gradients(&self, g: &Graph, fwd: &Forward) -> Vec<ParamGrad> {
        fwd.bound
            .vars
            .iter()
            .map(|(name, v)| {
                let values = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]);
                let rows = if name == WORD { fwd.bound.word_rows.clone() } else { None };
                ParamGrad {
                    name: name.clone(),
                    rows,
                    values,
                }
            })
            .collect()
    }

    /// Capsule lengths for one instance.
    pub fn capsule_norms(&self, inst: &Instance) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, inst)?;
        Ok(g.value(fwd.norms).to_vec())
    }

    /// Predicted relation set; `{NA}` when no non-NA capsule exceeds the threshold.
    pub fn predict(&self, inst: &Instance) -> Result<BTreeSet<RelationId>> {
        let scores = self.relation_scores(inst)?;
        let mut out = loss::predict(&scores, self.threshold(), Some(NA));
        if out.is_empty() {
            out.insert(NA);
        }
        Ok(out)
    }

    /// Maps token strings through the vocabulary and builds an instance.
    pub fn instance_from_tokens(&self, tokens: &[&str], ent1: usize, ent2: usize) -> Result<Instance> {
        let ids = tokens.iter().map(|t| self.vocab.id(t)).collect();
        Instance::new(ids, ent1, ent2, BTreeSet::from([NA]), crate::features::BagKey::new("", ""))
    }
}

impl RelationScorer for Model {
    /// Capsule lengths indexed by relation id; without an NA capsule the NA
    /// slot is 0.
    fn relation_scores(&self, inst: &Instance) -> Result<Vec<f64>> {
        let norms = self.capsule_norms(inst)?;
        if self.config.na_capsule {
            Ok(norms)
        } else {
            let mut out = Vec::with_capacity(norms.len() + 1);
            out.push(0.0);
            out.extend(norms);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::squash_values;
    use crate::features::BagKey;
    use rand::SeedableRng;

    pub(crate) fn tiny_model(seed: u64, cfg: ModelConfig) -> Model {
        let mut vocab = Vocab::new();
        for w in ["a", "b", "c", "d", "e", "f"] {
            vocab.insert(w);
        }
        let mut rels = RelationMap::new();
        rels.insert("/r1");
        rels.insert("/r2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(cfg, vocab, rels, &mut rng, 0.5).unwrap()
    }

    fn sample() -> Instance {
        Instance::new(vec![2, 3, 4, 5, 6, 7], 1, 4, BTreeSet::from([1, 2]), BagKey::new("x", "y")).unwrap()
    }

    #[test]
    fn inventory_matches_config() {
        let m = tiny_model(0, ModelConfig::tiny());
        m.params.check_inventory(&m.config, m.vocab.len(), m.relations.len()).unwrap();
        assert!(m.params.get(QUERY_W).is_some());
        assert_eq!(m.capsule_count(), 3);
        let m = tiny_model(0, ModelConfig {
            relation_query: false,
            na_capsule: false,
            ..ModelConfig::tiny()
        });
        assert!(m.params.get(QUERY_CONST).is_some() && m.params.get(QUERY_W).is_none());
        assert_eq!(m.capsule_count(), 2);
        let mut broken = m.params.clone();
        broken.tensors.remove(THRESHOLD);
        assert!(broken.check_inventory(&m.config, m.vocab.len(), m.relations.len()).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let m = tiny_model(1, ModelConfig::tiny());
        let a = m.capsule_norms(&sample()).unwrap();
        let b = m.capsule_norms(&sample()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|&n| (0.0..1.0).contains(&n)));
    }

    #[test]
    fn constant_query_keeps_shapes() {
        let m = tiny_model(2, ModelConfig {
            relation_query: false,
            ..ModelConfig::tiny()
        });
        let mut g = Graph::new();
        let f = m.forward(&mut g, &sample()).unwrap();
        assert_eq!(g.shape(f.norms), &[1, 3]);
        assert_eq!(f.heads.len(), 2);
        assert_eq!(f.low.len(), 2);
    }

    #[test]
    fn sliced_word_table_matches_full_binding() {
        let m = tiny_model(3, ModelConfig::tiny());
        let mut g1 = Graph::new();
        let f1 = m.forward_with(&mut g1, &sample(), Binding::Train, None).unwrap();
        let mut g2 = Graph::new();
        let f2 = m.forward_with(&mut g2, &sample(), Binding::Full, None).unwrap();
        assert_eq!(g1.value(f1.norms), g2.value(f2.norms));
        let cfgs = (LossConfig::default(), DisagreementConfig::default());
        let l1 = m.objective(&mut g1, &f1, &sample().labels, &cfgs.0, &cfgs.1, false).unwrap();
        let l2 = m.objective(&mut g2, &f2, &sample().labels, &cfgs.0, &cfgs.1, false).unwrap();
        g1.backward(l1.total).unwrap();
        g2.backward(l2.total).unwrap();
        let sparse = m.gradients(&g1, &f1).into_iter().find(|p| p.name == WORD).unwrap();
        let dense = m.gradients(&g2, &f2).into_iter().find(|p| p.name == WORD).unwrap();
        let k = m.config.word_dim;
        let rows = sparse.rows.unwrap();
        for (i, &r) in rows.iter().enumerate() {
            assert_eq!(&sparse.values[i * k..(i + 1) * k], &dense.values[r * k..(r + 1) * k]);
        }
        let covered: f64 = sparse.values.iter().map(|x| x.abs()).sum();
        let total: f64 = dense.values.iter().map(|x| x.abs()).sum();
        assert_eq!(covered, total);
    }

    /// The tiny forward pass recomputed from plain loops over the parameter
    /// values, reusing only the independent scalar squash.
    #[test]
    fn matches_composed_hand_trace() {
        let m = tiny_model(4, ModelConfig::tiny());
        let inst = sample();
        let p = |n: &str| m.params.get(n).unwrap();
        let mat = |t: &Tensor| -> Vec<Vec<f64>> {
            let c = t.shape()[t.shape().len() - 1];
            t.data().chunks(c).map(<[f64]>::to_vec).collect()
        };
        let vecmat = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> {
            (0..w[0].len()).map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cfg = &m.config;
        let (l, d) = (inst.len(), cfg.hidden);
        let clip = cfg.max_len as isize;
        let pos = |j: usize, e: usize| ((j as isize - e as isize).clamp(-clip, clip) + clip) as usize;
        let (word, p1, p2) = (mat(p(WORD)), mat(p("embed.pos1")), mat(p("embed.pos2")));
        let x: Vec<Vec<f64>> = (0..l)
            .map(|j| {
                let mut r = word[inst.token_ids[j]].clone();
                r.extend(&p1[pos(j, inst.ent1_pos)]);
                r.extend(&p2[pos(j, inst.ent2_pos)]);
                r
            })
            .collect();
        let lstm = |dir: &str, order: Vec<usize>| -> Vec<Vec<f64>> {
            let wx = mat(p(&format!("lstm.{dir}.w_x")));
            let wh = mat(p(&format!("lstm.{dir}.w_h")));
            let b = p(&format!("lstm.{dir}.bias")).data().to_vec();
            let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
            let mut out = vec![vec![]; l];
            for t in order {
                let zx = vecmat(&x[t], &wx);
                let zh = vecmat(&h, &wh);
                let z: Vec<f64> = (0..4 * d).map(|i| zx[i] + zh[i] + b[i]).collect();
                for k in 0..d {
                    let (i, f, o, g) = (sig(z[k]), sig(z[d + k]), sig(z[2 * d + k]), z[3 * d + k].tanh());
                    c[k] = f * c[k] + i * g;
                    h[k] = o * c[k].tanh();
                }
                out[t] = h.clone();
            }
            out
        };
        let fw = lstm("fwd", (0..l).collect());
        let bw = lstm("bwd", (0..l).rev().collect());
        let h: Vec<Vec<f64>> = (0..l).map(|t| (0..d).map(|k| fw[t][k] + bw[t][k]).collect()).collect();
        let diff: Vec<f64> = (0..d).map(|k| h[inst.ent1_pos][k] - h[inst.ent2_pos][k]).collect();
        let q = vecmat(&diff, &mat(p(QUERY_W)));
        let keys: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &mat(p("attn.w_k")))).collect();
        let vals: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &mat(p("attn.w_v")))).collect();
        let (n, dh) = (cfg.heads, d / cfg.heads);
        let mut cat = Vec::new();
        for head in 0..n {
            let s = head * dh..(head + 1) * dh;
            let e: Vec<f64> = keys
                .iter()
                .map(|k| q[s.clone()].iter().zip(&k[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|x| (x - mx).exp()).sum();
            let w: Vec<f64> = e.iter().map(|x| (x - mx).exp() / z).collect();
            cat.extend((0..dh).map(|c| (0..l).map(|t| w[t] * vals[t][head * dh + c]).sum::<f64>()));
        }
        let em = vecmat(&cat, &mat(p("attn.w_o")));
        let hid: Vec<f64> = vecmat(&em, &mat(p("ffn.w1")))
            .iter()
            .zip(p("ffn.b1").data())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let hr: Vec<f64> = vecmat(&hid, &mat(p("ffn.w2"))).iter().zip(p("ffn.b2").data()).map(|(a, b)| a + b).collect();
        let u: Vec<Vec<f64>> = hr.chunks(cfg.capsule_dim).map(squash_values).collect();
        let caps = m.capsule_count();
        let uhat: Vec<Vec<Vec<f64>>> = u
            .iter()
            .map(|ui| (0..caps).map(|j| vecmat(ui, &mat(p(&w_h_name(j))))).collect())
            .collect();
        let mut b = vec![vec![0.0; caps]; n];
        let mut r = vec![vec![]; caps];
        for it in 0..cfg.routing_iters {
            let c: Vec<Vec<f64>> = b
                .iter()
                .map(|row| {
                    let z: f64 = row.iter().map(|x: &f64| x.exp()).sum();
                    row.iter().map(|x| x.exp() / z).collect()
                })
                .collect();
            for j in 0..caps {
                let s: Vec<f64> = (0..cfg.relation_dim).map(|k| (0..n).map(|i| c[i][j] * uhat[i][j][k]).sum()).collect();
                r[j] = squash_values(&s);
            }
            if it + 1 < cfg.routing_iters {
                for i in 0..n {
                    for j in 0..caps {
                        b[i][j] += uhat[i][j].iter().zip(&r[j]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let expect: Vec<f64> = r.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let got = m.capsule_norms(&inst).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dropout_only_when_asked() {
        let m = tiny_model(5, ModelConfig::tiny());
        let base = m.capsule_norms(&sample()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let f = m.forward_with(&mut g, &sample(), Binding::Train, Some((&mut rng, 0.5))).unwrap();
        assert_ne!(g.value(f.norms), base.as_slice());
        let mut g = Graph::new();
        let f = m.forward_with(&mut g, &sample(), Binding::Train, Some((&mut rng, 0.0))).unwrap();
        assert_eq!(g.value(f.norms), base.as_slice());
    }

    #[test]
    fn predictions_map_capsules_to_relations() {
        let m = tiny_model(6, ModelConfig {
            na_capsule: false,
            ..ModelConfig::tiny()
        });
        let scores = m.relation_scores(&sample()).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[0], 0.0);
        let pred = m.predict(&sample()).unwrap();
        assert!(!pred.is_empty());
        assert_eq!(m.label_mask(&BTreeSet::from([NA])).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.label_mask(&BTreeSet::from([2])).unwrap(), vec![0.0, 1.0]);
    }
}
