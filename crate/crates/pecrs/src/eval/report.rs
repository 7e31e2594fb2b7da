//! End-to-end evaluation: rankings for every example, gated response
//! generation, and the aggregated report.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    distinct_n, genre_accuracy, item_decision_f1, per_turn_breakdown, perplexity, recall_at_k,
    rouge_n, unique_items, DistinctVariant, GenreAccuracy,
};
use crate::data::{DialogueExample, ItemBank, MetadataField, Tokenizer};
use crate::error::ModelError;
use crate::generator::{
    generate, generation_input, generation_loss, recommendation_gate, DecodingConfig,
};
use crate::recommender::{
    assemble_base_with_items, encode_item_bank, recommend, ItemVectors, Model,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// 0 = re-rank the full bank.
    pub m_inference: usize,
    pub rerank_chunk: usize,
    pub context_cap: usize,
    pub response_cap: usize,
    pub decoding: DecodingConfig,
    pub pruned_fields: BTreeSet<MetadataField>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            m_inference: 0,
            rerank_chunk: 64,
            context_cap: 256,
            response_cap: 64,
            decoding: DecodingConfig::default(),
            pruned_fields: BTreeSet::new(),
            seed: 0,
        }
    }
}

/// One line of the generated-responses JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub example_id: String,
    pub response: String,
    pub recommended_item: Option<u32>,
    pub ranking: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<u32, f64>,
    pub unique_items: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub item_f1: f64,
    pub perplexity: f64,
    pub distinct_per_sentence: BTreeMap<u32, f64>,
    pub distinct_ratio: BTreeMap<u32, f64>,
    pub per_turn_recall: BTreeMap<usize, f64>,
    pub genre_accuracy: GenreAccuracy,
    pub n_examples: usize,
    pub n_with_truth: usize,
    pub config: EvalConfig,
    pub note: String,
}

struct PerExample {
    ranking: Vec<u32>,
    record: GeneratedRecord,
    rouge1: f64,
    rouge2: f64,
    predicted_gate: bool,
    truth_gate: bool,
    nll_sum: f64,
    n_target_tokens: usize,
}

/// Evaluates a model over a test set, producing the aggregate report and
/// per-example generation records.
pub fn evaluate(
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &ItemBank,
    examples: &[DialogueExample],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<GeneratedRecord>), ModelError> {
    let bank_vectors = encode_item_bank(model, tokenizer, bank, &cfg.pruned_fields)?;
    let index: HashMap<u32, usize> =
        bank_vectors.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let m_inference = if cfg.m_inference == 0 { bank.len() } else { cfg.m_inference };
    let special = tokenizer.special();

    let per: Result<Vec<PerExample>, ModelError> = examples
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            let mut vectors = ItemVectors::new();
            for utt in &ex.context {
                for &id in &utt.item_ids {
                    vectors.insert(id, bank_vectors.vectors[index[&id]].clone());
                }
            }
            if let Some(p) = ex.target_item {
                vectors.insert(p, bank_vectors.vectors[index[&p]].clone());
            }
            let (base, _) =
                assemble_base_with_items(&ex.context, &vectors, tokenizer, cfg.context_cap)?;
            let mut query = base.clone();
            query.push_token(special.rec);

            let ranking =
                recommend(model, &bank_vectors, &query, m_inference, cfg.rerank_chunk)?.ranking;
            let top1 = ranking.first().copied();

            // Decision loop: draft without an item, check the gate, then
            // regenerate conditioned on the predicted item when it fires.
            let mut decoding = cfg.decoding.clone();
            decoding.seed = cfg.seed.wrapping_add(idx as u64 * 2);
            let draft_input = generation_input(&base, None, special);
            let draft = generate(&model.backbone, &draft_input, &decoding, special)?;
            let gate = recommendation_gate(&draft, special);

            let final_tokens = if gate {
                let v = top1.map(|id| bank_vectors.vectors[index[&id]].clone());
                let final_input = generation_input(&base, v.as_ref(), special);
                decoding.seed = decoding.seed.wrapping_add(1);
                generate(&model.backbone, &final_input, &decoding, special)?
            } else {
                draft
            };
            let response = tokenizer
                .decode(&final_tokens)
                .map_err(|e| ModelError::Invalid(e.to_string()))?;

            // Teacher-forced NLL over the ground-truth response.
            let gen_input = generation_input(
                &base,
                ex.target_item.map(|p| &bank_vectors.vectors[index[&p]]),
                special,
            );
            let mut targets = tokenizer.encode(&ex.target.text);
            targets.truncate(cfg.response_cap.saturating_sub(1).max(1));
            targets.push(special.eot);
            let nll = generation_loss(&model.backbone, &gen_input, &targets, special)?;

            let (_, _, r1f) = rouge_n(&response, &ex.target.text, 1);
            let (_, _, r2f) = rouge_n(&response, &ex.target.text, 2);

            Ok(PerExample {
                ranking,
                record: GeneratedRecord {
                    example_id: format!("{}#{}", ex.dialogue_id, idx),
                    response,
                    recommended_item: if gate { top1 } else { None },
                    ranking: Vec::new(), // filled below to avoid a clone
                },
                rouge1: r1f,
                rouge2: r2f,
                predicted_gate: gate,
                truth_gate: !ex.target.item_ids.is_empty(),
                nll_sum: nll * targets.len() as f64,
                n_target_tokens: targets.len(),
            })
        })
        .collect();
    let mut per = per?;

    // recommendation metrics over examples with ground truth
    let mut rankings = Vec::new();
    let mut truths = Vec::new();
    let mut turns = Vec::new();
    for (ex, p) in examples.iter().zip(per.iter()) {
        if let Some(t) = ex.target_item {
            rankings.push(p.ranking.clone());
            truths.push(t);
            turns.push(ex.context_turns());
        }
    }
    let mut recall_at = BTreeMap::new();
    for k in [1u32, 10, 50] {
        recall_at.insert(k, recall_at_k(&rankings, &truths, k as usize)?);
    }
    let top1s: Vec<u32> = rankings.iter().filter_map(|r| r.first().copied()).collect();

    let responses: Vec<String> = per.iter().map(|p| p.record.response.clone()).collect();
    let mut distinct_per_sentence = BTreeMap::new();
    let mut distinct_ratio = BTreeMap::new();
    for k in [2u32, 3, 4] {
        distinct_per_sentence
            .insert(k, distinct_n(&responses, k as usize, DistinctVariant::PerSentence));
        distinct_ratio.insert(k, distinct_n(&responses, k as usize, DistinctVariant::Ratio));
    }

    let predicted_gates: Vec<bool> = per.iter().map(|p| p.predicted_gate).collect();
    let truth_gates: Vec<bool> = per.iter().map(|p| p.truth_gate).collect();
    let total_tokens: usize = per.iter().map(|p| p.n_target_tokens).sum();
    let mean_nll =
        if total_tokens > 0 { per.iter().map(|p| p.nll_sum).sum::<f64>() / total_tokens as f64 } else { 0.0 };
    let n = per.len().max(1) as f64;

    let report = EvalReport {
        recall_at,
        unique_items: unique_items(&rankings),
        rouge1: per.iter().map(|p| p.rouge1).sum::<f64>() / n,
        rouge2: per.iter().map(|p| p.rouge2).sum::<f64>() / n,
        item_f1: item_decision_f1(&predicted_gates, &truth_gates),
        perplexity: perplexity(mean_nll),
        distinct_per_sentence,
        distinct_ratio,
        per_turn_recall: per_turn_breakdown(&rankings, &truths, &turns),
        genre_accuracy: genre_accuracy(&top1s, &truths, bank),
        n_examples: examples.len(),
        n_with_truth: rankings.len(),
        config: cfg.clone(),
        note: "distinct@k diversity values vary strongly with the decoding strategy and do not \
               track response quality; prefer the reference-based metrics"
            .to_string(),
    };

    let records: Vec<GeneratedRecord> = per
        .iter_mut()
        .map(|p| {
            p.record.ranking = std::mem::take(&mut p.ranking);
            p.record.clone()
        })
        .collect();

    Ok((report, records))
}

/// Plain-text rendering of the report.
pub fn render_text_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(&format!("{k:<28} {v}\n"));
    };
    for (k, v) in &report.recall_at {
        line(&format!("Recall@{k}"), format!("{v:.4}"));
    }
    line("Unique", report.unique_items.to_string());
    line("ROUGE-1 (F)", format!("{:.4}", report.rouge1));
    line("ROUGE-2 (F)", format!("{:.4}", report.rouge2));
    line("Item F1", format!("{:.4}", report.item_f1));
    line("PPL", format!("{:.4}", report.perplexity));
    for (k, v) in &report.distinct_per_sentence {
        line(&format!("Dist@{k} (per-sentence)"), format!("{v:.4}"));
    }
    for (k, v) in &report.distinct_ratio {
        line(&format!("Dist@{k} (ratio)"), format!("{v:.4}"));
    }
    for (turns, v) in &report.per_turn_recall {
        line(&format!("R@50 | {turns} prior turns"), format!("{v:.4}"));
    }
    match report.genre_accuracy.accuracy {
        Some(a) => line(
            "Genre accuracy (wrong top-1)",
            format!("{a:.4} over {} cases", report.genre_accuracy.counted),
        ),
        None => line("Genre accuracy (wrong top-1)", "n/a (no wrong predictions)".into()),
    }
    line("Examples", format!("{} ({} with truth)", report.n_examples, report.n_with_truth));
    out.push_str(&format!("note: {}\n", report.note));
    out
}
