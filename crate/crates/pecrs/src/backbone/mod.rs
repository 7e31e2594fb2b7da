//! A small decoder-only transformer with frozen base weights, low-rank
//! adapters on the attention query/value projections, trainable embeddings
//! for the four recommendation special tokens, mixed token/vector inputs,
//! and per-slot positional-embedding suppression.

mod backward;
pub mod checkpoint;
mod forward;
mod lora;
mod math;
mod stream;

pub use backward::{backward, InjectedGrad};
pub use forward::{forward, ForwardCache, ForwardOpts, ForwardOutput, LogitRows};
pub use lora::{lora_apply, LoraPair};
pub(crate) use lora::normal;
pub use stream::{build_rerank_mask, AttnMask, MaskRow, Slot, TokenStream};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tokenizer::RESERVED;
use crate::error::ModelError;

/// Number of special tokens with trainable embedding rows
/// ([ITEM], [SEP], [REC], [REC_END]).
pub const N_TRAINABLE_SPECIALS: usize = 4;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
}

impl BackboneConfig {
    /// Desk-scale defaults, trainable on CPU in minutes.
    pub fn desk(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 512,
            vocab_size,
            lora_rank: 8,
            lora_alpha: 16.0,
            dropout: 0.1,
        }
    }

    /// Tiny configuration for gradient checking and fast tests.
    pub fn tiny(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_positions: 64,
            vocab_size,
            lora_rank: 2,
            lora_alpha: 4.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Invalid(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(ModelError::Invalid("lora_rank must be >= 1".into()));
        }
        if self.vocab_size < RESERVED + 1 {
            return Err(ModelError::Invalid(format!("vocab_size {} too small", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Invalid(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Row in the trainable special-embedding table for a token id, if the
    /// id is one of the four CRS special tokens. The tokenizer places them
    /// at vocab_size - RESERVED .. vocab_size - RESERVED + 4.
    pub fn trainable_special_row(&self, id: u32) -> Option<usize> {
        let base = (self.vocab_size - RESERVED) as u32;
        if (base..base + N_TRAINABLE_SPECIALS as u32).contains(&id) {
            Some((id - base) as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn identity(d: usize) -> LayerNormParams {
        LayerNormParams { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    /// Projections stored d_in x d_out; applied as x @ W + b.
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
    pub b_v: Array1<f64>,
    pub b_o: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub lora_q: LoraPair,
    pub lora_v: LoraPair,
}

/// Model parameters. Everything is frozen after initialization except the
/// LoRA pairs and the special-token embedding rows; heads owned by the
/// recommender module hold the remaining trainable parameters.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    /// Trainable rows for [ITEM], [SEP], [REC], [REC_END].
    pub special_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNormParams,
    pub w_out: Array2<f64>,
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<BackboneParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model;
        fn gauss2(rng: &mut ChaCha20Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
            Array2::from_shape_fn(shape, |_| lora::normal(rng) * std)
        }

        let token_embedding = gauss2(&mut rng, (config.vocab_size, d), 0.02);
        let position_embedding = gauss2(&mut rng, (config.max_positions, d), 0.02);
        let special_embedding = gauss2(&mut rng, (N_TRAINABLE_SPECIALS, d), 0.02);

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                norm1: LayerNormParams::identity(d),
                norm2: LayerNormParams::identity(d),
                w_q: gauss2(&mut rng, (d, d), 0.02),
                w_k: gauss2(&mut rng, (d, d), 0.02),
                w_v: gauss2(&mut rng, (d, d), 0.02),
                w_o: gauss2(&mut rng, (d, d), 0.02),
                b_q: Array1::zeros(d),
                b_k: Array1::zeros(d),
                b_v: Array1::zeros(d),
                b_o: Array1::zeros(d),
                w_ff1: gauss2(&mut rng, (d, config.d_ff), 0.02),
                b_ff1: Array1::zeros(config.d_ff),
                w_ff2: gauss2(&mut rng, (config.d_ff, d), 0.02),
                b_ff2: Array1::zeros(d),
                lora_q: LoraPair::init(config.lora_rank, d, d, &mut rng),
                lora_v: LoraPair::init(config.lora_rank, d, d, &mut rng),
            });
        }
        let final_norm = LayerNormParams::identity(d);
        let w_out = gauss2(&mut rng, (d, config.vocab_size), 0.02);

        Ok(BackboneParams {
            config,
            token_embedding,
            position_embedding,
            special_embedding,
            layers,
            final_norm,
            w_out,
        })
    }

    /// Embedding row for a token id (trainable specials override the frozen
    /// table).
    pub fn embed_token(&self, id: u32) -> ndarray::ArrayView1<'_, f64> {
        match self.config.trainable_special_row(id) {
            Some(row) => self.special_embedding.row(row),
            None => self.token_embedding.row(id as usize),
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        let lora: usize = self
            .layers
            .iter()
            .map(|l| l.lora_q.a.len() + l.lora_q.b.len() + l.lora_v.a.len() + l.lora_v.b.len())
            .sum();
        lora + self.special_embedding.len()
    }

    pub fn frozen_param_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                l.w_q.len()
                    + l.w_k.len()
                    + l.w_v.len()
                    + l.w_o.len()
                    + l.b_q.len()
                    + l.b_k.len()
                    + l.b_v.len()
                    + l.b_o.len()
                    + l.w_ff1.len()
                    + l.b_ff1.len()
                    + l.w_ff2.len()
                    + l.b_ff2.len()
                    + l.norm1.gamma.len()
                    + l.norm1.beta.len()
                    + l.norm2.gamma.len()
                    + l.norm2.beta.len()
            })
            .sum();
        self.token_embedding.len()
            + self.position_embedding.len()
            + per_layer
            + self.final_norm.gamma.len()
            + self.final_norm.beta.len()
            + self.w_out.len()
    }

    /// SHA-256 over every frozen tensor in a fixed order; unchanged by any
    /// number of optimizer steps.
    pub fn frozen_sha256(&self) -> String {
        let mut hasher = Sha256::new();
        let mut eat = |arr: &[f64]| {
            for v in arr {
                hasher.update(v.to_le_bytes());
            }
        };
        eat(self.token_embedding.as_slice().unwrap());
        eat(self.position_embedding.as_slice().unwrap());
        for l in &self.layers {
            for w in [&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_ff1, &l.w_ff2] {
                eat(w.as_slice().unwrap());
            }
            for b in [&l.b_q, &l.b_k, &l.b_v, &l.b_o, &l.b_ff1, &l.b_ff2] {
                eat(b.as_slice().unwrap());
            }
            for n in [&l.norm1, &l.norm2] {
                eat(n.gamma.as_slice().unwrap());
                eat(n.beta.as_slice().unwrap());
            }
        }
        eat(self.final_norm.gamma.as_slice().unwrap());
        eat(self.final_norm.beta.as_slice().unwrap());
        eat(self.w_out.as_slice().unwrap());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients for one layer's trainable tensors.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub lora_q: LoraGrads,
    pub lora_v: LoraGrads,
}

/// Gradients for all trainable backbone tensors.
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub layers: Vec<LayerGrads>,
    pub special_embedding: Array2<f64>,
}

impl BackboneGrads {
    pub fn zeros(config: &BackboneConfig) -> BackboneGrads {
        let d = config.d_model;
        let r = config.lora_rank;
        let layer = || LayerGrads {
            lora_q: LoraGrads { a: Array2::zeros((r, d)), b: Array2::zeros((d, r)) },
            lora_v: LoraGrads { a: Array2::zeros((r, d)), b: Array2::zeros((d, r)) },
        };
        BackboneGrads {
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            special_embedding: Array2::zeros((N_TRAINABLE_SPECIALS, d)),
        }
    }

    pub fn add_assign(&mut self, other: &BackboneGrads) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.lora_q.a += &o.lora_q.a;
            l.lora_q.b += &o.lora_q.b;
            l.lora_v.a += &o.lora_v.a;
            l.lora_v.b += &o.lora_v.b;
        }
        self.special_embedding += &other.special_embedding;
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.lora_q.a.mapv_inplace(|v| v * s);
            l.lora_q.b.mapv_inplace(|v| v * s);
            l.lora_v.a.mapv_inplace(|v| v * s);
            l.lora_v.b.mapv_inplace(|v| v * s);
        }
        self.special_embedding.mapv_inplace(|v| v * s);
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.lora_q.a.iter().all(|&v| v == 0.0)
                && l.lora_q.b.iter().all(|&v| v == 0.0)
                && l.lora_v.a.iter().all(|&v| v == 0.0)
                && l.lora_v.b.iter().all(|&v| v == 0.0)
        }) && self.special_embedding.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_trainable_fraction_is_small() {
        let cfg = BackboneConfig::desk(300);
        let params = BackboneParams::init(cfg, 0).unwrap();
        let trainable = params.trainable_param_count() as f64;
        let total = trainable + params.frozen_param_count() as f64;
        let fraction = trainable / total;
        assert!(fraction <= 0.10, "trainable fraction {fraction} exceeds 10%");
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::tiny(20);
        let a = BackboneParams::init(cfg, 42).unwrap();
        let b = BackboneParams::init(cfg, 42).unwrap();
        assert_eq!(a.token_embedding, b.token_embedding);
        assert_eq!(a.layers[0].w_q, b.layers[0].w_q);
        assert_eq!(a.layers[1].lora_q.a, b.layers[1].lora_q.a);
    }

    #[test]
    fn lora_b_starts_at_zero() {
        let params = BackboneParams::init(BackboneConfig::tiny(20), 3).unwrap();
        for l in &params.layers {
            assert!(l.lora_q.b.iter().all(|&v| v == 0.0));
            assert!(l.lora_v.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BackboneConfig::tiny(20);
        cfg.n_heads = 3; // 16 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny(20);
        cfg.lora_rank = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn special_rows_resolve_from_vocab_tail() {
        let cfg = BackboneConfig::tiny(20);
        // layout: 14 ordinary, then item,sep,rec,rec_end,pad,eot
        assert_eq!(cfg.trainable_special_row(14), Some(0));
        assert_eq!(cfg.trainable_special_row(17), Some(3));
        assert_eq!(cfg.trainable_special_row(18), None); // pad
        assert_eq!(cfg.trainable_special_row(13), None);
    }

    #[test]
    fn frozen_hash_ignores_trainable_tensors() {
        let cfg = BackboneConfig::tiny(20);
        let mut params = BackboneParams::init(cfg, 7).unwrap();
        let before = params.frozen_sha256();
        params.special_embedding[[0, 0]] += 1.0;
        params.layers[0].lora_q.b[[0, 0]] += 1.0;
        assert_eq!(params.frozen_sha256(), before);
        params.layers[0].w_q[[0, 0]] += 1.0;
        assert_ne!(params.frozen_sha256(), before);
    }
}
