//! Evaluation metrics, the report pipeline, and diagnostic breakdowns.

mod metrics;
mod report;

pub use metrics::{
    distinct_n, genre_accuracy, item_decision_f1, normalize_tokens, per_turn_breakdown,
    perplexity, recall_at_k, rouge_n, unique_items, DistinctVariant, GenreAccuracy,
};
pub use report::{evaluate, render_text_table, EvalConfig, EvalReport, GeneratedRecord};
