//! Item encoding, context assembly, NCE retrieval, masked re-ranking, and
//! shared negative sampling.

mod context;
mod encode;
mod model;
mod negatives;
mod recommend;
mod scores;

pub use context::{assemble_base, assemble_base_with_items, assemble_context, ItemVectors};
pub use encode::{encode_item, encode_item_backward, item_hidden, pool_and_head, ItemForward};
pub use model::{CheckpointConfig, InferenceSettings, Model, ModelGrads, ModelOptions};
pub use negatives::sample_negatives;
pub use recommend::{
    encode_item_bank, load_embedding_cache, recommend, save_embedding_cache, ItemBankVectors,
    RankingResult,
};
pub use scores::{
    angular_distance, cosine, f_backward, f_forward, g_backward, g_forward, recall_loss,
    recall_loss_grads, rerank_loss, rerank_loss_grads, rerank_scores, retrieval_score,
    score_backward, score_value, FCache, ScoreKind,
};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;

use crate::backbone::normal;

/// Learnable attention-style pooling over item token outputs plus the item
/// projection head.
#[derive(Debug, Clone)]
pub struct ItemEncoderParams {
    pub pooling: Array1<f64>,
    pub h_w: Array2<f64>,
    pub h_b: Array1<f64>,
}

impl ItemEncoderParams {
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> ItemEncoderParams {
        let std = 1.0 / (d as f64).sqrt();
        ItemEncoderParams {
            pooling: Array1::from_shape_fn(d, |_| normal(rng) * std),
            h_w: Array2::from_shape_fn((d, d), |_| normal(rng) * std),
            h_b: Array1::zeros(d),
        }
    }

    pub fn param_count(&self) -> usize {
        self.pooling.len() + self.h_w.len() + self.h_b.len()
    }
}

/// Projection head f (two-layer MLP with ReLU) and scoring head g.
#[derive(Debug, Clone)]
pub struct RetrievalHeadsParams {
    pub f1_w: Array2<f64>,
    pub f1_b: Array1<f64>,
    pub f2_w: Array2<f64>,
    pub f2_b: Array1<f64>,
    pub g_w: Array1<f64>,
    pub g_b: Array1<f64>,
}

impl RetrievalHeadsParams {
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> RetrievalHeadsParams {
        let std = 1.0 / (d as f64).sqrt();
        RetrievalHeadsParams {
            f1_w: Array2::from_shape_fn((d, d), |_| normal(rng) * std),
            f1_b: Array1::zeros(d),
            f2_w: Array2::from_shape_fn((d, d), |_| normal(rng) * std),
            f2_b: Array1::zeros(d),
            g_w: Array1::from_shape_fn(d, |_| normal(rng) * std),
            g_b: Array1::zeros(1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.f1_w.len()
            + self.f1_b.len()
            + self.f2_w.len()
            + self.f2_b.len()
            + self.g_w.len()
            + self.g_b.len()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub pooling: Array1<f64>,
    pub h_w: Array2<f64>,
    pub h_b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadsGrads {
    pub f1_w: Array2<f64>,
    pub f1_b: Array1<f64>,
    pub f2_w: Array2<f64>,
    pub f2_b: Array1<f64>,
    pub g_w: Array1<f64>,
    pub g_b: Array1<f64>,
}

impl EncoderGrads {
    pub fn zeros(d: usize) -> EncoderGrads {
        EncoderGrads {
            pooling: Array1::zeros(d),
            h_w: Array2::zeros((d, d)),
            h_b: Array1::zeros(d),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        self.pooling += &other.pooling;
        self.h_w += &other.h_w;
        self.h_b += &other.h_b;
    }

    pub fn scale(&mut self, s: f64) {
        self.pooling.mapv_inplace(|v| v * s);
        self.h_w.mapv_inplace(|v| v * s);
        self.h_b.mapv_inplace(|v| v * s);
    }
}

impl HeadsGrads {
    pub fn zeros(d: usize) -> HeadsGrads {
        HeadsGrads {
            f1_w: Array2::zeros((d, d)),
            f1_b: Array1::zeros(d),
            f2_w: Array2::zeros((d, d)),
            f2_b: Array1::zeros(d),
            g_w: Array1::zeros(d),
            g_b: Array1::zeros(1),
        }
    }

    pub fn add_assign(&mut self, other: &HeadsGrads) {
        self.f1_w += &other.f1_w;
        self.f1_b += &other.f1_b;
        self.f2_w += &other.f2_w;
        self.f2_b += &other.f2_b;
        self.g_w += &other.g_w;
        self.g_b += &other.g_b;
    }

    pub fn scale(&mut self, s: f64) {
        self.f1_w.mapv_inplace(|v| v * s);
        self.f1_b.mapv_inplace(|v| v * s);
        self.f2_w.mapv_inplace(|v| v * s);
        self.f2_b.mapv_inplace(|v| v * s);
        self.g_w.mapv_inplace(|v| v * s);
        self.g_b.mapv_inplace(|v| v * s);
    }
}

