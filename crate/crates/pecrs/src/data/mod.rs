//! Item banks, dialogue corpora, tokenization, and the synthetic corpus
//! generator used for desk-scale experiments.

mod corpus;
mod format;
pub mod synthetic;
pub mod tokenizer;

pub use corpus::{load_dialogues, load_item_bank, write_dialogues, write_item_bank, ItemBank};
pub use format::{format_item_metadata, MetadataField, SEPARATOR_TEXT};
pub use tokenizer::{build_tokenizer, SpecialIds, Tokenizer};

use serde::{Deserialize, Serialize};

/// One item in the bank: identifier, metadata fields, and the formatted
/// description text derived from them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemRecord {
    pub id: u32,
    pub title: String,
    pub actors: Vec<String>,
    pub directors: Vec<String>,
    /// First entry, when present, is the primary genre.
    pub genres: Vec<String>,
    pub plot: String,
    /// Derived via [`format_item_metadata`] with no pruned fields; not
    /// serialized in items.jsonl.
    #[serde(skip)]
    pub description: String,
}

impl ItemRecord {
    pub fn primary_genre(&self) -> Option<&str> {
        self.genres.first().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

/// A single dialogue turn. `item_ids` lists the items mentioned in this
/// utterance, one per literal `[ITEM]` placeholder in `text`, in order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub item_ids: Vec<u32>,
}

/// One training or evaluation data point: the dialogue history, the
/// recommender utterance to predict, and at most one ground-truth item.
/// Recommender turns mentioning k items are split into k examples upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub dialogue_id: String,
    pub context: Vec<Utterance>,
    pub target: Utterance,
    pub target_item: Option<u32>,
}

impl DialogueExample {
    /// Number of utterances preceding the target turn.
    pub fn context_turns(&self) -> usize {
        self.context.len()
    }
}
