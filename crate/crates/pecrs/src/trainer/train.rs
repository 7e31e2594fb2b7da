//! The single-stage training loop: batch sampling, shared negatives, the
//! three-task step, AdamW updates, per-epoch validation recall, and
//! best-checkpoint retention.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::step::{build_shuffles, compute_step, NegativePlan, StepLosses};
use super::{combined_loss, lr_schedule, lr_schedule_decay, AdamW, TrainConfig};
use crate::data::{DialogueExample, ItemBank, Tokenizer};
use crate::error::ModelError;
use crate::eval::recall_at_k;
use crate::recommender::{
    assemble_context, encode_item_bank, recommend, InferenceSettings, ItemBankVectors, ItemVectors,
    Model,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_recall: f64,
    pub l_rerank: f64,
    pub l_gen: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochValidation {
    pub epoch: usize,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@50")]
    pub r50: f64,
    pub selection_score: f64,
}

/// Best-checkpoint record plus the full training curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub best_epoch: usize,
    pub selection_score: f64,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@50")]
    pub r50: f64,
    pub loss_curve: Vec<EpochStats>,
    pub validation_curve: Vec<EpochValidation>,
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub meta: CheckpointMeta,
    pub tokenizer: Tokenizer,
}

/// Validation split: dialogues whose id hashes into the 10% bucket.
pub fn is_validation_dialogue(dialogue_id: &str) -> bool {
    let digest = Sha256::digest(dialogue_id.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
    word % 10 == 0
}

pub fn split_examples(
    examples: &[DialogueExample],
) -> (Vec<DialogueExample>, Vec<DialogueExample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ex in examples {
        if is_validation_dialogue(&ex.dialogue_id) {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    (train, val)
}

/// R@{1,10,50} of the full retrieve-then-rerank pipeline over examples with
/// a ground-truth item.
pub fn pipeline_recall(
    model: &Model,
    tokenizer: &Tokenizer,
    bank_vectors: &ItemBankVectors,
    examples: &[DialogueExample],
    m_inference: usize,
    rerank_chunk: usize,
    context_cap: usize,
) -> Result<(f64, f64, f64), ModelError> {
    let index: HashMap<u32, usize> =
        bank_vectors.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let scored: Result<Vec<(Vec<u32>, u32)>, ModelError> = examples
        .par_iter()
        .filter(|ex| ex.target_item.is_some())
        .map(|ex| {
            let mut vectors = ItemVectors::new();
            for utt in &ex.context {
                for &id in &utt.item_ids {
                    vectors.insert(id, bank_vectors.vectors[index[&id]].clone());
                }
            }
            let stream = assemble_context(&ex.context, &vectors, tokenizer, context_cap)?;
            let result = recommend(model, bank_vectors, &stream, m_inference, rerank_chunk)?;
            Ok((result.ranking, ex.target_item.unwrap()))
        })
        .collect();
    let scored = scored?;
    if scored.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let rankings: Vec<Vec<u32>> = scored.iter().map(|(r, _)| r.clone()).collect();
    let truths: Vec<u32> = scored.iter().map(|(_, t)| *t).collect();
    Ok((
        recall_at_k(&rankings, &truths, 1)?,
        recall_at_k(&rankings, &truths, 10)?,
        recall_at_k(&rankings, &truths, 50)?,
    ))
}

/// Collects corpus texts for tokenizer construction: every utterance in the
/// given examples plus every item description.
pub fn tokenizer_corpus(examples: &[DialogueExample], bank: &ItemBank) -> Vec<String> {
    let mut texts = Vec::new();
    for ex in examples {
        for utt in &ex.context {
            texts.push(utt.text.clone());
        }
        texts.push(ex.target.text.clone());
    }
    for item in bank.items() {
        texts.push(item.description.clone());
    }
    texts
}

/// Trains a fresh model and leaves the best checkpoint (by mean validation
/// recall) in `out_dir`, together with meta.json and train_log.jsonl.
pub fn train(
    bank: &ItemBank,
    examples: &[DialogueExample],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ModelError::Invalid("no training examples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| ModelError::io(out_dir.display().to_string(), e))?;

    let (train_set, mut val_set) = split_examples(examples);
    let train_set = if train_set.is_empty() { examples.to_vec() } else { train_set };
    if val_set.is_empty() {
        val_set = train_set.clone();
    }

    let corpus = tokenizer_corpus(&train_set, bank);
    let tokenizer = crate::data::build_tokenizer(&corpus, cfg.vocab_size)
        .map_err(|e| ModelError::Invalid(e.to_string()))?;

    let backbone_cfg = cfg.backbone_config(tokenizer.total_size());
    let mut model = Model::init(backbone_cfg, cfg.model_options(), cfg.seed)?;
    let mut optimizer =
        AdamW::new(&mut model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);

    let pruned = cfg.pruned_fields();
    let m_inference = if cfg.m_inference == 0 { bank.len() } else { cfg.m_inference };
    let inference = InferenceSettings {
        context_cap: cfg.context_cap,
        response_cap: cfg.response_cap,
        rerank_chunk: cfg.rerank_chunk,
        m_inference: if cfg.m_inference == 0 { None } else { Some(cfg.m_inference) },
        pruned_fields: pruned.clone(),
    };

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup * steps_per_epoch as f64).round() as usize;

    let mut data_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5d5e_c1a5_0000_0001);
    let mut neg_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5d5e_c1a5_0000_0002);
    let mut shuf_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5d5e_c1a5_0000_0003);
    let mut drop_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5d5e_c1a5_0000_0004);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)
        .map_err(|e| ModelError::io(log_path.display().to_string(), e))?;

    let mut meta = CheckpointMeta {
        best_epoch: 0,
        selection_score: f64::NEG_INFINITY,
        r1: 0.0,
        r10: 0.0,
        r50: 0.0,
        loss_curve: Vec::new(),
        validation_curve: Vec::new(),
    };

    let mut global_step = 0usize;
    let micro = cfg.batch_size / cfg.grad_accum;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = data_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_losses = StepLosses::default();
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DialogueExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let denom = batch.len();
            let plan = NegativePlan::build(bank, &batch, cfg, &mut neg_rng)?;
            let shuffles = build_shuffles(batch.len(), cfg.m_train, &mut shuf_rng);
            let seeds: Vec<u64> = (0..batch.len()).map(|_| drop_rng.gen()).collect();

            let mut losses = StepLosses::default();
            let mut grads = crate::recommender::ModelGrads::zeros(&model.backbone.config);
            let mut start = 0usize;
            while start < batch.len() {
                let end = (start + micro).min(batch.len());
                let sub_plan = NegativePlan {
                    recall: plan.recall[start..end].to_vec(),
                    rerank: plan.rerank[start..end].to_vec(),
                };
                let (l, g) = compute_step(
                    &model,
                    &tokenizer,
                    bank,
                    &pruned,
                    &batch[start..end],
                    &sub_plan,
                    &shuffles[start..end],
                    cfg,
                    denom,
                    Some(&seeds[start..end]),
                    true,
                )?;
                losses.add(l);
                grads.add_assign(&g.unwrap());
                start = end;
            }

            let l_recall = losses.recall / denom as f64;
            let l_rerank = losses.rerank / denom as f64;
            let l_gen = losses.gen / denom as f64;
            let l_total = combined_loss(l_recall, l_rerank, l_gen, cfg);
            if !l_total.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    what: "combined loss",
                    step: global_step,
                    recall: l_recall,
                    rerank: l_rerank,
                    gen: l_gen,
                });
            }

            let lr = if cfg.lr_decay {
                lr_schedule_decay(global_step, total_steps, warmup_steps, cfg.lr_max)
            } else {
                lr_schedule(global_step, total_steps, warmup_steps, cfg.lr_max)
            };
            optimizer.step(&mut model, &grads, lr);

            let line = serde_json::json!({
                "step": global_step,
                "l_recall": l_recall,
                "l_rerank": l_rerank,
                "l_gen": l_gen,
                "l_total": l_total,
                "lr": lr,
            });
            writeln!(log, "{line}").map_err(|e| ModelError::io(log_path.display().to_string(), e))?;

            epoch_losses.add(StepLosses { recall: l_recall, rerank: l_rerank, gen: l_gen });
            epoch_batches += 1;
            global_step += 1;
        }

        let n = epoch_batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            l_recall: epoch_losses.recall / n,
            l_rerank: epoch_losses.rerank / n,
            l_gen: epoch_losses.gen / n,
            l_total: combined_loss(
                epoch_losses.recall / n,
                epoch_losses.rerank / n,
                epoch_losses.gen / n,
                cfg,
            ),
        };
        meta.loss_curve.push(stats);

        let bank_vectors = encode_item_bank(&model, &tokenizer, bank, &pruned)?;
        let (r1, r10, r50) = pipeline_recall(
            &model,
            &tokenizer,
            &bank_vectors,
            &val_set,
            m_inference,
            cfg.rerank_chunk,
            cfg.context_cap,
        )?;
        let selection = (r1 + r10 + r50) / 3.0;
        let line = serde_json::json!({
            "epoch": epoch,
            "R@1": r1,
            "R@10": r10,
            "R@50": r50,
            "selection_score": selection,
        });
        writeln!(log, "{line}").map_err(|e| ModelError::io(log_path.display().to_string(), e))?;
        meta.validation_curve.push(EpochValidation { epoch, r1, r10, r50, selection_score: selection });

        if selection > meta.selection_score {
            meta.best_epoch = epoch;
            meta.selection_score = selection;
            meta.r1 = r1;
            meta.r10 = r10;
            meta.r50 = r50;
            model.save(out_dir, &tokenizer, &inference)?;
        }
    }

    let meta_path = out_dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| ModelError::checkpoint(out_dir.display().to_string(), e.to_string()))?;
    std::fs::write(&meta_path, json)
        .map_err(|e| ModelError::io(meta_path.display().to_string(), e))?;

    Ok(TrainOutcome { checkpoint_dir: out_dir.to_path_buf(), meta, tokenizer })
}
