//! PECRS: a parameter-efficient conversational recommender system.
//!
//! A single decoder-only transformer (frozen base weights plus low-rank
//! adapters) encodes items from textual metadata, retrieves and re-ranks
//! recommendations against dialogue context, and generates responses.
//! Everything runs on CPU in double precision with hand-written backward
//! passes, so the whole pipeline is deterministic under a fixed seed.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod recommender;
pub mod trainer;

pub use error::{DataError, ModelError};
