//! Dialogue-context assembly into model input streams: utterances in order,
//! item vectors injected next to their special-token markers, and the final
//! [REC] query slot.

use std::collections::HashMap;

use ndarray::Array1;

use crate::backbone::{AttnMask, Slot, TokenStream};
use crate::data::{Speaker, Tokenizer, Utterance};
use crate::error::ModelError;

pub type ItemVectors = HashMap<u32, Array1<f64>>;

fn utterance_slots(
    utt: &Utterance,
    vectors: &ItemVectors,
    tokenizer: &Tokenizer,
    out: &mut Vec<Slot>,
) -> Result<(), ModelError> {
    let special = tokenizer.special();
    for &id in &utt.item_ids {
        let v = vectors
            .get(&id)
            .ok_or_else(|| ModelError::Invalid(format!("no precomputed vector for item {id}")))?;
        match utt.speaker {
            Speaker::Seeker => {
                out.push(Slot::Token(special.sep));
                out.push(Slot::Vector(v.clone()));
                out.push(Slot::Token(special.sep));
            }
            Speaker::Recommender => {
                out.push(Slot::Token(special.rec));
                out.push(Slot::Vector(v.clone()));
                out.push(Slot::Token(special.rec_end));
            }
        }
    }
    for id in tokenizer.encode(&utt.text) {
        out.push(Slot::Token(id));
    }
    Ok(())
}

/// Concatenates the context utterances without the trailing [REC] query
/// slot, left-truncated so that appending one slot stays within
/// `context_cap`. Also reports which surviving slots hold injected item
/// vectors, as (slot index, item id) pairs.
pub fn assemble_base_with_items(
    context: &[Utterance],
    vectors: &ItemVectors,
    tokenizer: &Tokenizer,
    context_cap: usize,
) -> Result<(TokenStream, Vec<(usize, u32)>), ModelError> {
    if context_cap < 2 {
        return Err(ModelError::Invalid(format!("context_cap {context_cap} too small")));
    }
    let mut slots = Vec::new();
    let mut ids = Vec::new();
    for utt in context {
        let before = slots.len();
        utterance_slots(utt, vectors, tokenizer, &mut slots)?;
        // injected vectors sit at offsets 1, 4, 7, ... of the prefix blocks
        for (k, _) in utt.item_ids.iter().enumerate() {
            ids.push((before + 3 * k + 1, utt.item_ids[k]));
        }
    }
    let keep = context_cap - 1;
    if slots.len() > keep {
        let dropped = slots.len() - keep;
        slots.drain(..dropped);
        ids.retain(|&(slot, _)| slot >= dropped);
        for entry in ids.iter_mut() {
            entry.0 -= dropped;
        }
    }
    let n = slots.len();
    Ok((TokenStream { slots, use_position: vec![true; n], mask: AttnMask::causal(n) }, ids))
}

/// [`assemble_base_with_items`] without the slot bookkeeping.
pub fn assemble_base(
    context: &[Utterance],
    vectors: &ItemVectors,
    tokenizer: &Tokenizer,
    context_cap: usize,
) -> Result<TokenStream, ModelError> {
    Ok(assemble_base_with_items(context, vectors, tokenizer, context_cap)?.0)
}

/// Full retrieval-query form: the assembled context ending with a [REC]
/// slot, at most `context_cap` slots long.
pub fn assemble_context(
    context: &[Utterance],
    vectors: &ItemVectors,
    tokenizer: &Tokenizer,
    context_cap: usize,
) -> Result<TokenStream, ModelError> {
    let mut stream = assemble_base(context, vectors, tokenizer, context_cap)?;
    stream.push_token(tokenizer.special().rec);
    Ok(stream)
}
