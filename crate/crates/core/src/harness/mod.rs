//! Model assembly, optimization, checkpoints and the training loop.

mod adam;
mod check;
mod checkpoint;
mod inspect;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::attention::EnergyScale;
use crate::capsule::CapsuleConfig;
use crate::error::{Error, Result};
use crate::eval::Aggregation;
use crate::loss::LossConfig;
use crate::regularize::DisagreementConfig;

pub use adam::Adam;
pub use check::{gradcheck_model, GRADCHECK_FLOOR, GRADCHECK_TOLERANCE};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use inspect::{inspect, AttentionRecord, RoutingRecord};
pub use model::{Forward, LossParts, Model, ModelParams};
pub use train::{train, EpochMetrics, TrainOutcome};

/// Architecture hyperparameters. The capsule count equals the head count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sentence length `l`; longer sentences are truncated at load time and
    /// position features are clipped to `[-l, l]`.
    pub max_len: usize,
    /// Word embedding width `k`.
    pub word_dim: usize,
    /// Position embedding width `p`.
    pub pos_dim: usize,
    /// BLSTM width `d`.
    pub hidden: usize,
    /// Attention heads `n`, also the low-level capsule count `t`.
    pub heads: usize,
    /// FFN output width `d'`.
    pub ffn_dim: usize,
    /// Low-level capsule width `d_u`.
    pub capsule_dim: usize,
    /// Relation capsule width `d_r`.
    pub relation_dim: usize,
    pub routing_iters: usize,
    pub energy_scale: EnergyScale,
    /// Build the attention query from the entity states; when off a learned
    /// constant query is used instead.
    pub relation_query: bool,
    /// Give NA its own relation capsule.
    pub na_capsule: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 100,
            word_dim: 50,
            pos_dim: 5,
            hidden: 256,
            heads: 16,
            ffn_dim: 256,
            capsule_dim: 16,
            relation_dim: 16,
            routing_iters: 3,
            energy_scale: EnergyScale::SqrtModel,
            relation_query: true,
            na_capsule: true,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            max_len: 6,
            word_dim: 4,
            pos_dim: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            capsule_dim: 4,
            relation_dim: 4,
            ..Self::default()
        }
    }

    /// Relation capsule count for an inventory of `relations` ids (NA included).
    pub fn capsules_for(&self, relations: usize) -> usize {
        if self.na_capsule {
            relations
        } else {
            relations.saturating_sub(1)
        }
    }

    pub fn capsule_config(&self, relations: usize) -> CapsuleConfig {
        CapsuleConfig {
            low: self.heads,
            low_dim: self.capsule_dim,
            high_dim: self.relation_dim,
            high: self.capsules_for(relations),
            routing_iters: self.routing_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("max_len", self.max_len),
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("capsule_dim", self.capsule_dim),
            ("relation_dim", self.relation_dim),
            ("routing_iters", self.routing_iters),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.heads * self.capsule_dim != self.ffn_dim {
            return Err(Error::config(format!(
                "{} capsules of width {} do not partition an FFN output of width {}",
                self.heads, self.capsule_dim, self.ffn_dim
            )));
        }
        Ok(())
    }
}

/// Everything `train` needs besides the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub disagreement: DisagreementConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Drop probability on BLSTM outputs during training.
    pub dropout: f64,
    pub seed: u64,
    /// Worker threads for batch members; 0 uses every core.
    pub threads: usize,
    pub aggregation: Aggregation,
    /// Record exact-match accuracy on the training set every epoch.
    pub log_train_match: bool,
    /// Stop once the training exact-match rate reaches this value.
    pub stop_at_train_match: Option<f64>,
    /// Optional word vectors (`token v_1 .. v_k` per line) copied into the
    /// word table before training.
    pub pretrained: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            disagreement: DisagreementConfig::default(),
            batch_size: 50,
            lr: 1e-4,
            epochs: 20,
            dropout: 0.5,
            seed: 0,
            threads: 0,
            aggregation: Aggregation::Max,
            log_train_match: false,
            stop_at_train_match: None,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset used by the test suite and the synthetic experiments.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch_size: 2,
            lr: 0.005,
            epochs: 200,
            dropout: 0.0,
            log_train_match: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.disagreement.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
