//! The two-stage inference pipeline: full-bank retrieval scoring, then
//! chunked re-ranking of the top candidates. Also the item-embedding cache
//! file keyed by checkpoint hash.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::encode_item;
use super::scores::{f_forward, rerank_scores, score_value};
use super::Model;
use crate::backbone::{forward, ForwardOpts, TokenStream};
use crate::data::{format_item_metadata, ItemBank, MetadataField, Tokenizer};
use crate::error::ModelError;

/// Precomputed item vectors in bank order.
#[derive(Debug, Clone)]
pub struct ItemBankVectors {
    pub ids: Vec<u32>,
    pub vectors: Vec<Array1<f64>>,
}

impl ItemBankVectors {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector_for(&self, id: u32) -> Option<&Array1<f64>> {
        self.ids.iter().position(|&i| i == id).map(|i| &self.vectors[i])
    }
}

/// Encodes the whole bank once; reused for every dialogue context.
pub fn encode_item_bank(
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &ItemBank,
    pruned: &BTreeSet<MetadataField>,
) -> Result<ItemBankVectors, ModelError> {
    let items: Vec<_> = bank.items().to_vec();
    let vectors: Result<Vec<Array1<f64>>, ModelError> = items
        .par_iter()
        .map(|item| {
            let text = format_item_metadata(item, pruned);
            let tokens = tokenizer.encode(&text);
            Ok(encode_item(&model.backbone, &model.encoder, &model.options, &tokens)?.vector)
        })
        .collect();
    Ok(ItemBankVectors { ids: items.iter().map(|i| i.id).collect(), vectors: vectors? })
}

/// Retrieval similarities over the full bank, the re-ranked top candidates,
/// and the final ranking.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// One retrieval score per bank item, in bank order.
    pub retrieval_scores: Vec<f64>,
    /// Top-M item ids by retrieval score.
    pub candidates: Vec<u32>,
    /// Re-rank scores parallel to `candidates`.
    pub rerank_scores: Vec<f64>,
    /// Candidates ordered by re-rank score (ties by ascending item id).
    pub ranking: Vec<u32>,
}

/// Runs retrieval then re-ranking for one assembled context stream (ending
/// with the [REC] query slot). `m_inference` is clamped to the bank size.
pub fn recommend(
    model: &Model,
    bank_vectors: &ItemBankVectors,
    stream: &TokenStream,
    m_inference: usize,
    rerank_chunk: usize,
) -> Result<RankingResult, ModelError> {
    if bank_vectors.is_empty() {
        return Err(ModelError::Invalid("empty item bank".into()));
    }
    let out = forward(&model.backbone, stream, ForwardOpts::inference())?;
    let d_t = out.hidden.row(stream.len() - 1).to_owned();
    let query = f_forward(&model.heads, &d_t).out;

    let retrieval_scores: Vec<f64> = bank_vectors
        .vectors
        .iter()
        .map(|v| score_value(model.options.score_kind, &query, v))
        .collect();

    let m = m_inference.clamp(1, bank_vectors.len());
    let mut order: Vec<usize> = (0..bank_vectors.len()).collect();
    order.sort_by(|&a, &b| {
        retrieval_scores[b]
            .partial_cmp(&retrieval_scores[a])
            .unwrap()
            .then_with(|| bank_vectors.ids[a].cmp(&bank_vectors.ids[b]))
    });
    order.truncate(m);
    let candidates: Vec<u32> = order.iter().map(|&i| bank_vectors.ids[i]).collect();
    let cand_vectors: Vec<Array1<f64>> =
        order.iter().map(|&i| bank_vectors.vectors[i].clone()).collect();

    let scores =
        rerank_scores(&model.backbone, &model.heads, stream, &cand_vectors, rerank_chunk)?;

    let mut rank_order: Vec<usize> = (0..candidates.len()).collect();
    rank_order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then_with(|| candidates[a].cmp(&candidates[b]))
    });
    let ranking: Vec<u32> = rank_order.iter().map(|&i| candidates[i]).collect();

    Ok(RankingResult { retrieval_scores, candidates, rerank_scores: scores, ranking })
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    checkpoint_hash: String,
    d_model: usize,
    item_ids: Vec<u32>,
}

/// Writes the bank embeddings as a JSON header line plus a raw f64-LE
/// matrix.
pub fn save_embedding_cache(
    path: &Path,
    vectors: &ItemBankVectors,
    checkpoint_hash: &str,
) -> Result<(), ModelError> {
    let display = path.display().to_string();
    let d_model = vectors.vectors.first().map(|v| v.len()).unwrap_or(0);
    let header = CacheHeader {
        checkpoint_hash: checkpoint_hash.to_string(),
        d_model,
        item_ids: vectors.ids.clone(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| ModelError::io(&display, e))?;
    let mut json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::checkpoint(&display, e.to_string()))?;
    json.push(b'\n');
    file.write_all(&json).map_err(|e| ModelError::io(&display, e))?;
    for v in &vectors.vectors {
        for x in v.iter() {
            file.write_all(&x.to_le_bytes()).map_err(|e| ModelError::io(&display, e))?;
        }
    }
    Ok(())
}

/// Loads a cache written by [`save_embedding_cache`], rejecting it when the
/// checkpoint hash differs.
pub fn load_embedding_cache(
    path: &Path,
    expected_hash: &str,
) -> Result<ItemBankVectors, ModelError> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::io(&display, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::checkpoint(&display, "missing cache header".to_string()))?;
    let header: CacheHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| ModelError::checkpoint(&display, e.to_string()))?;
    if header.checkpoint_hash != expected_hash {
        return Err(ModelError::checkpoint(
            &display,
            format!(
                "cache was built for checkpoint {}, current is {}",
                header.checkpoint_hash, expected_hash
            ),
        ));
    }
    let payload = &bytes[newline + 1..];
    let expect_len = header.item_ids.len() * header.d_model * 8;
    if payload.len() != expect_len {
        return Err(ModelError::checkpoint(
            &display,
            format!("cache payload {} bytes, want {expect_len}", payload.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(header.item_ids.len());
    for row in payload.chunks_exact(header.d_model * 8) {
        let v: Vec<f64> =
            row.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        vectors.push(Array1::from(v));
    }
    Ok(ItemBankVectors { ids: header.item_ids, vectors })
}
