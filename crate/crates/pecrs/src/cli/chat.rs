//! Interactive terminal chat: the user plays the seeker, the model
//! retrieves, re-ranks, gates, and replies.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::Result;

use super::commands::DecodingArgs;
use crate::data::{ItemBank, Speaker, Tokenizer, Utterance};
use crate::generator::{generate, generation_input, recommendation_gate};
use crate::recommender::{
    assemble_base_with_items, encode_item_bank, recommend, InferenceSettings, ItemBankVectors,
    ItemVectors, Model,
};

/// Finds known item titles mentioned in free text (case-insensitive
/// substring match, longest titles first) and replaces each with [ITEM].
fn mark_item_mentions(text: &str, bank: &ItemBank) -> (String, Vec<u32>) {
    let mut titles: Vec<(&str, u32)> =
        bank.items().iter().map(|i| (i.title.as_str(), i.id)).collect();
    titles.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));

    let mut marked = text.to_string();
    let mut found: Vec<(usize, u32)> = Vec::new();
    for (title, id) in titles {
        if title.is_empty() {
            continue;
        }
        let lower = marked.to_lowercase();
        if let Some(pos) = lower.find(&title.to_lowercase()) {
            marked.replace_range(pos..pos + title.len(), "[ITEM]");
            found.push((pos, id));
        }
    }
    found.sort_by_key(|&(pos, _)| pos);
    (marked, found.into_iter().map(|(_, id)| id).collect())
}

struct ChatState {
    context: Vec<Utterance>,
    turn: u64,
}

#[allow(clippy::too_many_arguments)]
fn respond(
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &ItemBank,
    bank_vectors: &ItemBankVectors,
    settings: &InferenceSettings,
    state: &mut ChatState,
    decoding: &DecodingArgs,
    seed: u64,
    line: &str,
) -> Result<String> {
    let special = tokenizer.special();
    let (marked, item_ids) = mark_item_mentions(line, bank);
    state.context.push(Utterance { speaker: Speaker::Seeker, text: marked, item_ids });

    let mut vectors = ItemVectors::new();
    for utt in &state.context {
        for &id in &utt.item_ids {
            if let Some(v) = bank_vectors.vector_for(id) {
                vectors.insert(id, v.clone());
            }
        }
    }
    let (base, _) =
        assemble_base_with_items(&state.context, &vectors, tokenizer, settings.context_cap)?;
    let mut query = base.clone();
    query.push_token(special.rec);

    let m = settings.m_inference.unwrap_or(0);
    let m = if m == 0 { bank.len() } else { m };
    let ranking = recommend(model, bank_vectors, &query, m, settings.rerank_chunk)?.ranking;
    let top1 = ranking.first().copied();

    let mut cfg = decoding.to_config(seed.wrapping_add(state.turn * 2));
    let draft = generate(&model.backbone, &generation_input(&base, None, special), &cfg, special)?;
    let gate = recommendation_gate(&draft, special);

    let (tokens, recommended) = if gate {
        let v = top1.and_then(|id| bank_vectors.vector_for(id)).cloned();
        cfg.seed = cfg.seed.wrapping_add(1);
        let final_tokens =
            generate(&model.backbone, &generation_input(&base, v.as_ref(), special), &cfg, special)?;
        (final_tokens, top1)
    } else {
        (draft, None)
    };

    let raw = tokenizer.decode(&tokens).map_err(|e| crate::error::ModelError::Invalid(e.to_string()))?;
    state.context.push(Utterance {
        speaker: Speaker::Recommender,
        text: raw.clone(),
        item_ids: recommended.into_iter().collect(),
    });
    state.turn += 1;

    // surface titles instead of the raw marker
    let display = match recommended.and_then(|id| bank.get(id)) {
        Some(item) => raw.replace("[ITEM]", &item.title),
        None => raw,
    };
    Ok(display)
}

pub fn run_chat(
    checkpoint: &Path,
    items: &Path,
    seed: u64,
    decoding: &DecodingArgs,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let (model, tokenizer, settings) = Model::load(checkpoint)?;
    let bank = crate::data::load_item_bank(items)?;
    let pruned: BTreeSet<_> = settings.pruned_fields.clone();
    let bank_vectors = encode_item_bank(&model, &tokenizer, &bank, &pruned)?;

    writeln!(output, "pecrs chat — /reset clears context, /quit exits")?;
    let mut state = ChatState { context: Vec::new(), turn: 0 };
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "/quit" => break,
            "/reset" => {
                state.context.clear();
                writeln!(output, "(context cleared)")?;
            }
            _ => {
                let reply = respond(
                    &model,
                    &tokenizer,
                    &bank,
                    &bank_vectors,
                    &settings,
                    &mut state,
                    decoding,
                    seed,
                    line,
                )?;
                writeln!(output, "{reply}")?;
            }
        }
        output.flush()?;
    }
    Ok(())
}
