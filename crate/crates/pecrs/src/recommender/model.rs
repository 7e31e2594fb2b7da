//! The complete model bundle (backbone + item encoder + retrieval heads)
//! with checkpoint persistence and the canonical trainable-tensor ordering
//! shared by the optimizer and gradient checks.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::scores::ScoreKind;
use super::{EncoderGrads, HeadsGrads, ItemEncoderParams, RetrievalHeadsParams};
use crate::backbone::checkpoint::{TensorReader, TensorWriter};
use crate::backbone::{BackboneConfig, BackboneGrads, BackboneParams};
use crate::data::{MetadataField, Tokenizer};
use crate::error::ModelError;

/// Structural switches that must match between training and inference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModelOptions {
    pub score_kind: ScoreKind,
    /// Learned attention-style pooling over item tokens (false = mean).
    pub learned_pooling: bool,
    /// Apply the item head after pooling (false = identity).
    pub use_item_head: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { score_kind: ScoreKind::NegAngular, learned_pooling: true, use_item_head: true }
    }
}

/// Settings the inference pipeline reads back from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InferenceSettings {
    pub context_cap: usize,
    pub response_cap: usize,
    pub rerank_chunk: usize,
    /// None means re-rank the full bank.
    pub m_inference: Option<usize>,
    pub pruned_fields: BTreeSet<MetadataField>,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            context_cap: 256,
            response_cap: 64,
            rerank_chunk: 64,
            m_inference: None,
            pruned_fields: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: BackboneConfig,
    pub options: ModelOptions,
    pub inference: InferenceSettings,
    pub tokenizer: String,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: BackboneParams,
    pub encoder: ItemEncoderParams,
    pub heads: RetrievalHeadsParams,
    pub options: ModelOptions,
}

impl Model {
    pub fn init(config: BackboneConfig, options: ModelOptions, seed: u64) -> Result<Model, ModelError> {
        let backbone = BackboneParams::init(config, seed)?;
        // heads get their own stream, decoupled from backbone init order
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let encoder = ItemEncoderParams::init(config.d_model, &mut rng);
        let heads = RetrievalHeadsParams::init(config.d_model, &mut rng);
        Ok(Model { backbone, encoder, heads, options })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.backbone.trainable_param_count()
            + self.encoder.param_count()
            + self.heads.param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.backbone.frozen_param_count() + self.trainable_param_count()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_param_count() as f64 / self.total_param_count() as f64
    }

    /// Flat views over every trainable tensor, in the canonical order used
    /// by [`ModelGrads::flat_views`]. Optimizer state and gradient checks
    /// index into this ordering.
    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.lora_q.a"), layer.lora_q.a.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.lora_q.b"), layer.lora_q.b.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.lora_v.a"), layer.lora_v.a.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.lora_v.b"), layer.lora_v.b.as_slice_mut().unwrap()));
        }
        out.push(("special_embedding".into(), self.backbone.special_embedding.as_slice_mut().unwrap()));
        out.push(("encoder.pooling".into(), self.encoder.pooling.as_slice_mut().unwrap()));
        out.push(("encoder.h_w".into(), self.encoder.h_w.as_slice_mut().unwrap()));
        out.push(("encoder.h_b".into(), self.encoder.h_b.as_slice_mut().unwrap()));
        out.push(("heads.f1_w".into(), self.heads.f1_w.as_slice_mut().unwrap()));
        out.push(("heads.f1_b".into(), self.heads.f1_b.as_slice_mut().unwrap()));
        out.push(("heads.f2_w".into(), self.heads.f2_w.as_slice_mut().unwrap()));
        out.push(("heads.f2_b".into(), self.heads.f2_b.as_slice_mut().unwrap()));
        out.push(("heads.g_w".into(), self.heads.g_w.as_slice_mut().unwrap()));
        out.push(("heads.g_b".into(), self.heads.g_b.as_slice_mut().unwrap()));
        out
    }

    pub fn save(
        &self,
        dir: &Path,
        tokenizer: &Tokenizer,
        inference: &InferenceSettings,
    ) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir.display().to_string(), e))?;

        let config = CheckpointConfig {
            backbone: self.backbone.config,
            options: self.options,
            inference: inference.clone(),
            tokenizer: "tokenizer.json".to_string(),
        };
        let config_path = dir.join("config.json");
        let json = serde_json::to_string_pretty(&config)
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;
        std::fs::write(&config_path, json)
            .map_err(|e| ModelError::io(config_path.display().to_string(), e))?;

        tokenizer
            .save(&dir.join("tokenizer.json"))
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;

        let mut w = TensorWriter::new();
        let b = &self.backbone;
        w.push2("token_embedding", &b.token_embedding);
        w.push2("position_embedding", &b.position_embedding);
        w.push2("special_embedding", &b.special_embedding);
        for (i, l) in b.layers.iter().enumerate() {
            w.push1(&format!("layer{i}.norm1.gamma"), &l.norm1.gamma);
            w.push1(&format!("layer{i}.norm1.beta"), &l.norm1.beta);
            w.push1(&format!("layer{i}.norm2.gamma"), &l.norm2.gamma);
            w.push1(&format!("layer{i}.norm2.beta"), &l.norm2.beta);
            w.push2(&format!("layer{i}.w_q"), &l.w_q);
            w.push2(&format!("layer{i}.w_k"), &l.w_k);
            w.push2(&format!("layer{i}.w_v"), &l.w_v);
            w.push2(&format!("layer{i}.w_o"), &l.w_o);
            w.push1(&format!("layer{i}.b_q"), &l.b_q);
            w.push1(&format!("layer{i}.b_k"), &l.b_k);
            w.push1(&format!("layer{i}.b_v"), &l.b_v);
            w.push1(&format!("layer{i}.b_o"), &l.b_o);
            w.push2(&format!("layer{i}.w_ff1"), &l.w_ff1);
            w.push1(&format!("layer{i}.b_ff1"), &l.b_ff1);
            w.push2(&format!("layer{i}.w_ff2"), &l.w_ff2);
            w.push1(&format!("layer{i}.b_ff2"), &l.b_ff2);
            w.push2(&format!("layer{i}.lora_q.a"), &l.lora_q.a);
            w.push2(&format!("layer{i}.lora_q.b"), &l.lora_q.b);
            w.push2(&format!("layer{i}.lora_v.a"), &l.lora_v.a);
            w.push2(&format!("layer{i}.lora_v.b"), &l.lora_v.b);
        }
        w.push1("final_norm.gamma", &b.final_norm.gamma);
        w.push1("final_norm.beta", &b.final_norm.beta);
        w.push2("w_out", &b.w_out);
        w.push1("encoder.pooling", &self.encoder.pooling);
        w.push2("encoder.h_w", &self.encoder.h_w);
        w.push1("encoder.h_b", &self.encoder.h_b);
        w.push2("heads.f1_w", &self.heads.f1_w);
        w.push1("heads.f1_b", &self.heads.f1_b);
        w.push2("heads.f2_w", &self.heads.f2_w);
        w.push1("heads.f2_b", &self.heads.f2_b);
        w.push1("heads.g_w", &self.heads.g_w);
        w.push1("heads.g_b", &self.heads.g_b);
        w.write(dir)
    }

    pub fn load(dir: &Path) -> Result<(Model, Tokenizer, InferenceSettings), ModelError> {
        let config_path = dir.join("config.json");
        let text = std::fs::read_to_string(&config_path)
            .map_err(|e| ModelError::io(config_path.display().to_string(), e))?;
        let config: CheckpointConfig = serde_json::from_str(&text)
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;
        let cfg = config.backbone;
        cfg.validate()?;

        let tokenizer = Tokenizer::load(&dir.join(&config.tokenizer))
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;

        let r = TensorReader::open(dir)?;
        let d = cfg.d_model;
        let mut backbone = BackboneParams::init(cfg, 0)?;
        backbone.token_embedding = r.get2("token_embedding", (cfg.vocab_size, d))?;
        backbone.position_embedding = r.get2("position_embedding", (cfg.max_positions, d))?;
        backbone.special_embedding =
            r.get2("special_embedding", (crate::backbone::N_TRAINABLE_SPECIALS, d))?;
        for (i, l) in backbone.layers.iter_mut().enumerate() {
            l.norm1.gamma = r.get1(&format!("layer{i}.norm1.gamma"), d)?;
            l.norm1.beta = r.get1(&format!("layer{i}.norm1.beta"), d)?;
            l.norm2.gamma = r.get1(&format!("layer{i}.norm2.gamma"), d)?;
            l.norm2.beta = r.get1(&format!("layer{i}.norm2.beta"), d)?;
            l.w_q = r.get2(&format!("layer{i}.w_q"), (d, d))?;
            l.w_k = r.get2(&format!("layer{i}.w_k"), (d, d))?;
            l.w_v = r.get2(&format!("layer{i}.w_v"), (d, d))?;
            l.w_o = r.get2(&format!("layer{i}.w_o"), (d, d))?;
            l.b_q = r.get1(&format!("layer{i}.b_q"), d)?;
            l.b_k = r.get1(&format!("layer{i}.b_k"), d)?;
            l.b_v = r.get1(&format!("layer{i}.b_v"), d)?;
            l.b_o = r.get1(&format!("layer{i}.b_o"), d)?;
            l.w_ff1 = r.get2(&format!("layer{i}.w_ff1"), (d, cfg.d_ff))?;
            l.b_ff1 = r.get1(&format!("layer{i}.b_ff1"), cfg.d_ff)?;
            l.w_ff2 = r.get2(&format!("layer{i}.w_ff2"), (cfg.d_ff, d))?;
            l.b_ff2 = r.get1(&format!("layer{i}.b_ff2"), d)?;
            l.lora_q.a = r.get2(&format!("layer{i}.lora_q.a"), (cfg.lora_rank, d))?;
            l.lora_q.b = r.get2(&format!("layer{i}.lora_q.b"), (d, cfg.lora_rank))?;
            l.lora_v.a = r.get2(&format!("layer{i}.lora_v.a"), (cfg.lora_rank, d))?;
            l.lora_v.b = r.get2(&format!("layer{i}.lora_v.b"), (d, cfg.lora_rank))?;
        }
        backbone.final_norm.gamma = r.get1("final_norm.gamma", d)?;
        backbone.final_norm.beta = r.get1("final_norm.beta", d)?;
        backbone.w_out = r.get2("w_out", (d, cfg.vocab_size))?;

        let encoder = ItemEncoderParams {
            pooling: r.get1("encoder.pooling", d)?,
            h_w: r.get2("encoder.h_w", (d, d))?,
            h_b: r.get1("encoder.h_b", d)?,
        };
        let heads = RetrievalHeadsParams {
            f1_w: r.get2("heads.f1_w", (d, d))?,
            f1_b: r.get1("heads.f1_b", d)?,
            f2_w: r.get2("heads.f2_w", (d, d))?,
            f2_b: r.get1("heads.f2_b", d)?,
            g_w: r.get1("heads.g_w", d)?,
            g_b: r.get1("heads.g_b", 1)?,
        };

        Ok((
            Model { backbone, encoder, heads, options: config.options },
            tokenizer,
            config.inference,
        ))
    }
}

/// Gradients for every trainable tensor in the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: BackboneGrads,
    pub encoder: EncoderGrads,
    pub heads: HeadsGrads,
}

impl ModelGrads {
    pub fn zeros(config: &BackboneConfig) -> ModelGrads {
        ModelGrads {
            backbone: BackboneGrads::zeros(config),
            encoder: EncoderGrads::zeros(config.d_model),
            heads: HeadsGrads::zeros(config.d_model),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.backbone.add_assign(&other.backbone);
        self.encoder.add_assign(&other.encoder);
        self.heads.add_assign(&other.heads);
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        self.encoder.scale(s);
        self.heads.scale(s);
    }

    /// Flat views aligned with [`Model::trainable_tensors_mut`].
    pub fn flat_views(&self) -> Vec<(String, &[f64])> {
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            out.push((format!("layer{i}.lora_q.a"), s2(&layer.lora_q.a)));
            out.push((format!("layer{i}.lora_q.b"), s2(&layer.lora_q.b)));
            out.push((format!("layer{i}.lora_v.a"), s2(&layer.lora_v.a)));
            out.push((format!("layer{i}.lora_v.b"), s2(&layer.lora_v.b)));
        }
        out.push(("special_embedding".into(), s2(&self.backbone.special_embedding)));
        out.push(("encoder.pooling".into(), s1(&self.encoder.pooling)));
        out.push(("encoder.h_w".into(), s2(&self.encoder.h_w)));
        out.push(("encoder.h_b".into(), s1(&self.encoder.h_b)));
        out.push(("heads.f1_w".into(), s2(&self.heads.f1_w)));
        out.push(("heads.f1_b".into(), s1(&self.heads.f1_b)));
        out.push(("heads.f2_w".into(), s2(&self.heads.f2_w)));
        out.push(("heads.f2_b".into(), s1(&self.heads.f2_b)));
        out.push(("heads.g_w".into(), s1(&self.heads.g_w)));
        out.push(("heads.g_b".into(), s1(&self.heads.g_b)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_tokenizer;

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tok = build_tokenizer(&["a b c d".into()], 24).unwrap();
        let cfg = BackboneConfig::tiny(tok.total_size());
        let mut model = Model::init(cfg, ModelOptions::default(), 99).unwrap();
        // perturb a trainable tensor so the round trip is non-trivial
        model.backbone.layers[0].lora_q.b[[1, 1]] = 0.5;
        model.heads.g_b[0] = -0.25;

        let inference = InferenceSettings::default();
        model.save(dir.path(), &tok, &inference).unwrap();
        let (loaded, tok2, inf2) = Model::load(dir.path()).unwrap();

        assert_eq!(loaded.backbone.token_embedding, model.backbone.token_embedding);
        assert_eq!(loaded.backbone.layers[0].lora_q.b, model.backbone.layers[0].lora_q.b);
        assert_eq!(loaded.heads.g_b, model.heads.g_b);
        assert_eq!(loaded.encoder.h_w, model.encoder.h_w);
        assert_eq!(loaded.options, model.options);
        assert_eq!(inf2, inference);
        assert_eq!(tok2.total_size(), tok.total_size());
        assert_eq!(loaded.backbone.frozen_sha256(), model.backbone.frozen_sha256());
    }

    #[test]
    fn trainable_ordering_matches_grads() {
        let cfg = BackboneConfig::tiny(24);
        let mut model = Model::init(cfg, ModelOptions::default(), 1).unwrap();
        let grads = ModelGrads::zeros(&cfg);
        let names_m: Vec<String> =
            model.trainable_tensors_mut().into_iter().map(|(n, _)| n).collect();
        let names_g: Vec<String> = grads.flat_views().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_m, names_g);
    }

    #[test]
    fn trainable_count_matches_flat_lengths() {
        let cfg = BackboneConfig::tiny(24);
        let mut model = Model::init(cfg, ModelOptions::default(), 1).unwrap();
        let total: usize = model.trainable_tensors_mut().iter().map(|(_, s)| s.len()).sum();
        assert_eq!(total, model.trainable_param_count());
    }
}
