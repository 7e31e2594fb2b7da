//! Item metadata formatting: "Title [SEP] Actors [SEP] Directors [SEP]
//! Genres [SEP] Plot", with optional field pruning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ItemRecord;

/// Literal separator text placed between metadata fields.
pub const SEPARATOR_TEXT: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataField {
    Title,
    Actors,
    Directors,
    Genres,
    Plot,
}

impl MetadataField {
    pub const ALL: [MetadataField; 5] = [
        MetadataField::Title,
        MetadataField::Actors,
        MetadataField::Directors,
        MetadataField::Genres,
        MetadataField::Plot,
    ];

    pub fn parse(s: &str) -> Option<MetadataField> {
        match s.to_ascii_lowercase().as_str() {
            "title" => Some(MetadataField::Title),
            "actors" => Some(MetadataField::Actors),
            "directors" => Some(MetadataField::Directors),
            "genres" => Some(MetadataField::Genres),
            "plot" => Some(MetadataField::Plot),
            _ => None,
        }
    }
}

/// Joins the five metadata fields in fixed order with `[SEP]` between them.
/// Fields named in `pruned` are omitted together with their adjacent
/// separator; list fields join internally with ", ".
pub fn format_item_metadata(item: &ItemRecord, pruned: &BTreeSet<MetadataField>) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(5);
    for field in MetadataField::ALL {
        if pruned.contains(&field) {
            continue;
        }
        let text = match field {
            MetadataField::Title => item.title.clone(),
            MetadataField::Actors => item.actors.join(", "),
            MetadataField::Directors => item.directors.join(", "),
            MetadataField::Genres => item.genres.join(", "),
            MetadataField::Plot => item.plot.clone(),
        };
        parts.push(text);
    }
    parts.join(&format!(" {SEPARATOR_TEXT} "))
}
