//! JSONL corpus loading: item banks and dialogue files, with per-line error
//! reporting and the one-example-per-recommended-item split.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use super::{format_item_metadata, DialogueExample, ItemRecord, Speaker, Utterance};
use crate::error::DataError;

/// An item bank with O(1) id lookup.
#[derive(Debug, Clone)]
pub struct ItemBank {
    items: Vec<ItemRecord>,
    by_id: HashMap<u32, usize>,
}

impl ItemBank {
    pub fn new(items: Vec<ItemRecord>) -> Result<ItemBank, DataError> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (idx, item) in items.iter().enumerate() {
            if by_id.insert(item.id, idx).is_some() {
                return Err(DataError::Invalid(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(ItemBank { items, by_id })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn get(&self, id: u32) -> Option<&ItemRecord> {
        self.by_id.get(&id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: u32) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Item ids in bank order.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|i| i.id)
    }
}

#[derive(Deserialize)]
struct ItemLine {
    id: u32,
    title: String,
    #[serde(default)]
    actors: Vec<String>,
    #[serde(default)]
    directors: Vec<String>,
    #[serde(default)]
    genres: Vec<String>,
    #[serde(default)]
    plot: String,
}

/// Loads items.jsonl; descriptions are derived from the metadata fields.
pub fn load_item_bank(path: &Path) -> Result<ItemBank, DataError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| DataError::io(&display, e))?;
    let reader = BufReader::new(file);

    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| DataError::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ItemLine = serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if seen.insert(parsed.id, lineno).is_some() {
            return Err(DataError::DuplicateItem { path: display, line: lineno, id: parsed.id });
        }
        let mut item = ItemRecord {
            id: parsed.id,
            title: parsed.title,
            actors: parsed.actors,
            directors: parsed.directors,
            genres: parsed.genres,
            plot: parsed.plot,
            description: String::new(),
        };
        item.description = format_item_metadata(&item, &BTreeSet::new());
        items.push(item);
    }
    ItemBank::new(items)
}

#[derive(Deserialize)]
struct TurnLine {
    speaker: String,
    text: String,
    #[serde(default)]
    items: Vec<u32>,
}

#[derive(Deserialize)]
struct DialogueLine {
    dialogue_id: String,
    turns: Vec<TurnLine>,
}

/// Loads dialogues.jsonl and splits each dialogue into examples: one per
/// recommender utterance, multiplied by the number of items it mentions
/// (chit-chat recommender turns yield one example without a target item).
pub fn load_dialogues(path: &Path, bank: &ItemBank) -> Result<Vec<DialogueExample>, DataError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| DataError::io(&display, e))?;
    let reader = BufReader::new(file);

    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| DataError::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DialogueLine =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
                path: display.clone(),
                line: lineno,
                msg: e.to_string(),
            })?;

        let mut turns = Vec::with_capacity(parsed.turns.len());
        for turn in parsed.turns {
            let speaker = match turn.speaker.as_str() {
                "seeker" => Speaker::Seeker,
                "recommender" => Speaker::Recommender,
                other => {
                    return Err(DataError::UnknownSpeaker {
                        path: display,
                        line: lineno,
                        label: other.to_string(),
                    })
                }
            };
            if turn.text.trim().is_empty() {
                return Err(DataError::EmptyUtterance { path: display, line: lineno });
            }
            for &id in &turn.items {
                if !bank.contains(id) {
                    return Err(DataError::UnresolvedItem { path: display, line: lineno, id });
                }
            }
            turns.push(Utterance { speaker, text: turn.text, item_ids: turn.items });
        }

        for t in 0..turns.len() {
            if turns[t].speaker != Speaker::Recommender {
                continue;
            }
            let context: Vec<Utterance> = turns[..t].to_vec();
            let target = turns[t].clone();
            if target.item_ids.is_empty() {
                examples.push(DialogueExample {
                    dialogue_id: parsed.dialogue_id.clone(),
                    context,
                    target,
                    target_item: None,
                });
            } else {
                for &item in &target.item_ids {
                    examples.push(DialogueExample {
                        dialogue_id: parsed.dialogue_id.clone(),
                        context: context.clone(),
                        target: target.clone(),
                        target_item: Some(item),
                    });
                }
            }
        }
    }
    Ok(examples)
}

/// Writes items.jsonl in the schema accepted by [`load_item_bank`].
pub fn write_item_bank(path: &Path, items: &[ItemRecord]) -> Result<(), DataError> {
    let display = path.display().to_string();
    let mut out = std::fs::File::create(path).map_err(|e| DataError::io(&display, e))?;
    for item in items {
        let line = serde_json::json!({
            "id": item.id,
            "title": item.title,
            "actors": item.actors,
            "directors": item.directors,
            "genres": item.genres,
            "plot": item.plot,
        });
        writeln!(out, "{line}").map_err(|e| DataError::io(&display, e))?;
    }
    Ok(())
}

/// Writes dialogues.jsonl in the schema accepted by [`load_dialogues`].
pub fn write_dialogues(
    path: &Path,
    dialogues: &[(String, Vec<Utterance>)],
) -> Result<(), DataError> {
    let display = path.display().to_string();
    let mut out = std::fs::File::create(path).map_err(|e| DataError::io(&display, e))?;
    for (id, turns) in dialogues {
        let turns_json: Vec<_> = turns
            .iter()
            .map(|t| {
                serde_json::json!({
                    "speaker": match t.speaker { Speaker::Seeker => "seeker", Speaker::Recommender => "recommender" },
                    "text": t.text,
                    "items": t.item_ids,
                })
            })
            .collect();
        let line = serde_json::json!({ "dialogue_id": id, "turns": turns_json });
        writeln!(out, "{line}").map_err(|e| DataError::io(&display, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.jsonl");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    fn tiny_bank() -> ItemBank {
        let items = (0..12)
            .map(|i| ItemRecord {
                id: i,
                title: format!("movie {i}"),
                actors: vec![],
                directors: vec![],
                genres: vec!["drama".into()],
                plot: "a plot".into(),
                description: String::new(),
            })
            .collect();
        ItemBank::new(items).unwrap()
    }

    #[test]
    fn multi_item_turn_splits_into_examples() {
        let bank = tiny_bank();
        let content = r#"{"dialogue_id":"d1","turns":[
{"speaker":"seeker","text":"hi","items":[]},
{"speaker":"recommender","text":"watch [ITEM] or [ITEM]","items":[5,9]}
]}"#
        .replace('\n', "");
        let (_dir, path) = write_tmp(&content);
        let examples = load_dialogues(&path, &bank).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].target_item, Some(5));
        assert_eq!(examples[1].target_item, Some(9));
        assert_eq!(examples[0].context, examples[1].context);
    }

    #[test]
    fn chitchat_recommender_turn_yields_targetless_example() {
        let bank = tiny_bank();
        let content = r#"{"dialogue_id":"d1","turns":[{"speaker":"seeker","text":"hi","items":[]},{"speaker":"recommender","text":"hello there","items":[]}]}"#;
        let (_dir, path) = write_tmp(content);
        let examples = load_dialogues(&path, &bank).unwrap();
        assert_eq!(examples.len(), 1);
        assert!(examples[0].target_item.is_none());
        assert_eq!(examples[0].target.speaker, Speaker::Recommender);
    }

    #[test]
    fn example_multiplication_over_recommender_turns() {
        let bank = tiny_bank();
        // 3 recommender turns: 2 items, 0 items, 1 item -> 2 + 1 + 1 = 4.
        let content = r#"{"dialogue_id":"d1","turns":[{"speaker":"seeker","text":"hi","items":[]},{"speaker":"recommender","text":"[ITEM] and [ITEM]","items":[1,2]},{"speaker":"seeker","text":"more","items":[]},{"speaker":"recommender","text":"what do you like","items":[]},{"speaker":"seeker","text":"ok","items":[]},{"speaker":"recommender","text":"try [ITEM]","items":[3]}]}"#;
        let (_dir, path) = write_tmp(content);
        let examples = load_dialogues(&path, &bank).unwrap();
        assert_eq!(examples.len(), 4);
        let with_item = examples.iter().filter(|e| e.target_item.is_some()).count();
        assert_eq!(with_item, 3);
        for e in &examples {
            if let Some(t) = e.target_item {
                assert!(e.target.item_ids.contains(&t));
            }
        }
    }

    #[test]
    fn unresolved_item_names_the_line() {
        let bank = tiny_bank();
        let content = "{\"dialogue_id\":\"a\",\"turns\":[{\"speaker\":\"seeker\",\"text\":\"hi\",\"items\":[]}]}\n{\"dialogue_id\":\"b\",\"turns\":[{\"speaker\":\"recommender\",\"text\":\"[ITEM]\",\"items\":[999]}]}\n";
        let (_dir, path) = write_tmp(content);
        match load_dialogues(&path, &bank) {
            Err(DataError::UnresolvedItem { line, id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(id, 999);
            }
            other => panic!("expected UnresolvedItem, got {other:?}"),
        }
    }

    #[test]
    fn unknown_speaker_rejected() {
        let bank = tiny_bank();
        let content = r#"{"dialogue_id":"a","turns":[{"speaker":"narrator","text":"hi","items":[]}]}"#;
        let (_dir, path) = write_tmp(content);
        assert!(matches!(load_dialogues(&path, &bank), Err(DataError::UnknownSpeaker { .. })));
    }

    #[test]
    fn malformed_json_names_the_line() {
        let bank = tiny_bank();
        let content = "{\"dialogue_id\":\"a\",\"turns\":[]}\nnot json\n";
        let (_dir, path) = write_tmp(content);
        match load_dialogues(&path, &bank) {
            Err(DataError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_item_id_rejected() {
        let content = "{\"id\":1,\"title\":\"a\",\"actors\":[],\"directors\":[],\"genres\":[],\"plot\":\"\"}\n{\"id\":1,\"title\":\"b\",\"actors\":[],\"directors\":[],\"genres\":[],\"plot\":\"\"}\n";
        let (_dir, path) = write_tmp(content);
        assert!(matches!(load_item_bank(&path), Err(DataError::DuplicateItem { line: 2, .. })));
    }

    #[test]
    fn item_bank_round_trip_and_descriptions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let items = vec![ItemRecord {
            id: 3,
            title: "The Test".into(),
            actors: vec!["A".into(), "B".into()],
            directors: vec!["D".into()],
            genres: vec!["comedy".into()],
            plot: "stuff happens".into(),
            description: String::new(),
        }];
        write_item_bank(&path, &items).unwrap();
        let bank = load_item_bank(&path).unwrap();
        assert_eq!(bank.len(), 1);
        let item = bank.get(3).unwrap();
        assert_eq!(item.description, "The Test [SEP] A, B [SEP] D [SEP] comedy [SEP] stuff happens");
    }
}
