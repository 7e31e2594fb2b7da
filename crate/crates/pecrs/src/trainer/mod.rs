//! Single-stage multi-task training: configuration, the weighted loss
//! combination, the learning-rate schedule, the optimizer, and the loop.

mod optim;
mod step;
mod train;

pub use optim::AdamW;
pub use step::{compute_step, NegativePlan, StepGrads, StepLosses};
pub use train::{train, CheckpointMeta, EpochStats, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::ModelError;
use crate::recommender::{ModelOptions, ScoreKind};

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Ablations {
    pub no_recall: bool,
    pub no_rerank: bool,
    pub no_gen: bool,
    /// Sample negatives per batch element instead of once per batch.
    pub no_batch_sharing: bool,
    /// Sample separate negatives for the recall and rerank losses.
    pub no_task_sharing: bool,
    /// Mean-pool item tokens instead of the learned pooling.
    pub no_item_pooling: bool,
    /// Skip the item head (identity after pooling).
    pub no_item_head: bool,
    /// Describe items by title alone.
    pub title_only: bool,
}

/// All training knobs; every field maps to a CLI flag of the same name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m_train: usize,
    /// 0 = re-rank the full bank at inference.
    pub m_inference: usize,
    pub lr_max: f64,
    /// Warmup length in epochs (fractions allowed).
    pub warmup: f64,
    /// Linearly decay to zero after warmup instead of holding lr_max.
    pub lr_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Effective-batch multiplier: optimizer steps use batch_size examples
    /// split into this many forward/backward passes.
    pub grad_accum: usize,
    pub context_cap: usize,
    pub response_cap: usize,
    pub ablations: Ablations,
    pub seed: u64,
    pub score_kind: ScoreKind,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    // model architecture
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
    /// Tokenizer budget (reserved ids included).
    pub vocab_size: usize,
    /// Candidates per re-ranking forward pass at evaluation time.
    pub rerank_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.15,
            beta: 0.85,
            gamma: 1.0,
            m_train: 32,
            m_inference: 0,
            lr_max: 1e-3,
            warmup: 1.0,
            lr_decay: false,
            epochs: 10,
            batch_size: 8,
            grad_accum: 1,
            context_cap: 256,
            response_cap: 64,
            ablations: Ablations::default(),
            seed: 0,
            score_kind: ScoreKind::NegAngular,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 512,
            lora_rank: 8,
            lora_alpha: 16.0,
            dropout: 0.1,
            vocab_size: 2000,
            rerank_chunk: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(ModelError::Invalid("loss weights must be nonnegative".into()));
        }
        if self.m_train == 0 {
            return Err(ModelError::Invalid("m_train must be >= 1".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.batch_size % self.grad_accum != 0 {
            return Err(ModelError::Invalid(format!(
                "batch_size {} must be a positive multiple of grad_accum {}",
                self.batch_size, self.grad_accum
            )));
        }
        if self.epochs == 0 {
            return Err(ModelError::Invalid("epochs must be >= 1".into()));
        }
        self.backbone_config(self.vocab_size).validate()
    }

    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            vocab_size,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            dropout: self.dropout,
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            score_kind: self.score_kind,
            learned_pooling: !self.ablations.no_item_pooling,
            use_item_head: !self.ablations.no_item_head,
        }
    }

    /// Loss weights with ablation flags applied.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        (
            if self.ablations.no_recall { 0.0 } else { self.alpha },
            if self.ablations.no_rerank { 0.0 } else { self.beta },
            if self.ablations.no_gen { 0.0 } else { self.gamma },
        )
    }

    pub fn pruned_fields(&self) -> std::collections::BTreeSet<crate::data::MetadataField> {
        use crate::data::MetadataField;
        if self.ablations.title_only {
            [MetadataField::Actors, MetadataField::Directors, MetadataField::Genres, MetadataField::Plot]
                .into()
        } else {
            Default::default()
        }
    }
}

/// Weighted combination of the three task losses.
pub fn combined_loss(l_recall: f64, l_rerank: f64, l_gen: f64, cfg: &TrainConfig) -> f64 {
    let (a, b, g) = cfg.effective_weights();
    a * l_recall + b * l_rerank + g * l_gen
}

/// Linear warmup to lr_max, then constant.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        lr_max * step as f64 / warmup_steps as f64
    } else {
        lr_max
    }
}

/// Variant with linear decay to zero after warmup.
pub fn lr_schedule_decay(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_max: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        lr_max * step as f64 / warmup_steps as f64
    } else if total_steps > warmup_steps {
        lr_max * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    } else {
        lr_max
    }
}
