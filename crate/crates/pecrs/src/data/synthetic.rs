//! Synthetic corpus generator: a small movie world where each item is
//! identified by a unique (genre, topic) pair, and every dialogue states a
//! preference that pins down exactly one item. A rule-based oracle over the
//! generator's own keyword map therefore reaches Recall@1 = 1.0, the upper
//! bound for any learned model on this data.

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{format_item_metadata, DialogueExample, ItemRecord, Speaker, Utterance};
use crate::error::DataError;

pub const GENRES: [&str; 8] =
    ["action", "comedy", "drama", "horror", "romance", "scifi", "fantasy", "documentary"];

const TITLE_SUFFIX: [&str; 8] =
    ["mission", "party", "story", "night", "letter", "galaxy", "quest", "journal"];

const TOPICS: [&str; 64] = [
    "dragons", "robots", "pirates", "wizards", "zombies", "detectives", "astronauts", "vampires",
    "samurai", "cowboys", "aliens", "spies", "ghosts", "knights", "hackers", "mermaids",
    "dinosaurs", "gangsters", "racers", "chefs", "boxers", "dancers", "magicians", "soldiers",
    "surfers", "ninjas", "clowns", "monks", "thieves", "angels", "demons", "giants",
    "elves", "orcs", "witches", "mutants", "androids", "explorers", "gladiators", "musicians",
    "painters", "poets", "sailors", "miners", "farmers", "bakers", "hunters", "pilots",
    "doctors", "teachers", "lawyers", "athletes", "climbers", "divers", "skaters", "drummers",
    "singers", "jugglers", "acrobats", "inventors", "librarians", "janitors", "plumbers",
    "sculptors",
];

const FILLERS: [&str; 12] = [
    "destiny", "revenge", "friendship", "courage", "secrets", "treasure", "honor", "freedom",
    "betrayal", "hope", "glory", "redemption",
];

const FIRST_NAMES: [&str; 10] =
    ["maya", "liam", "aria", "noah", "zoe", "felix", "iris", "hugo", "nina", "oscar"];
const LAST_NAMES: [&str; 10] =
    ["stone", "rivers", "blake", "frost", "hale", "cross", "vega", "lane", "marsh", "quill"];

fn topic_for(index: usize) -> String {
    let base = TOPICS[index % TOPICS.len()];
    let round = index / TOPICS.len();
    if round == 0 {
        base.to_string()
    } else {
        format!("{base}{round}")
    }
}

/// Generates an item bank plus raw dialogues, deterministic for a given
/// seed. Returns (items, dialogues) where dialogues pair an id with turns,
/// ready for [`super::write_dialogues`].
pub fn generate_synthetic_corpus(
    n_items: usize,
    n_dialogues: usize,
    seed: u64,
) -> Result<(Vec<ItemRecord>, Vec<(String, Vec<Utterance>)>), DataError> {
    if n_items < 2 {
        return Err(DataError::Invalid(format!("need at least 2 items, got {n_items}")));
    }
    if n_dialogues < 1 {
        return Err(DataError::Invalid(format!("need at least 1 dialogue, got {n_dialogues}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let genre = GENRES[i % GENRES.len()];
        let topic = topic_for(i / GENRES.len());
        let suffix = TITLE_SUFFIX[i % GENRES.len()];
        let a1 = FIRST_NAMES[rng.gen_range(0..FIRST_NAMES.len())];
        let a2 = LAST_NAMES[rng.gen_range(0..LAST_NAMES.len())];
        let b1 = FIRST_NAMES[rng.gen_range(0..FIRST_NAMES.len())];
        let b2 = LAST_NAMES[rng.gen_range(0..LAST_NAMES.len())];
        let d1 = FIRST_NAMES[rng.gen_range(0..FIRST_NAMES.len())];
        let d2 = LAST_NAMES[rng.gen_range(0..LAST_NAMES.len())];
        let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
        let mut item = ItemRecord {
            id: i as u32,
            title: format!("the {topic} {suffix}"),
            actors: vec![format!("{a1} {a2}"), format!("{b1} {b2}")],
            directors: vec![format!("{d1} {d2}")],
            genres: vec![genre.to_string()],
            plot: format!("a {genre} story about {topic} and {filler}"),
            description: String::new(),
        };
        item.description = format_item_metadata(&item, &BTreeSet::new());
        items.push(item);
    }

    // Round-robin over a shuffled bank guarantees every item appears as a
    // target once n_dialogues >= n_items.
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);

    let mut dialogues = Vec::with_capacity(n_dialogues);
    for d in 0..n_dialogues {
        let target_idx = order[d % n_items];
        let item = &items[target_idx];
        let genre = item.genres[0].clone();
        let topic = item.plot.split_whitespace().nth(4).unwrap().to_string();

        let kind = rng.gen_range(0..100u32);
        let mut turns = Vec::new();
        if kind < 55 {
            turns.push(seeker_ask(&mut rng, &genre, &topic));
        } else if kind < 80 {
            let greeting = ["hello", "hi there"][rng.gen_range(0..2)].to_string();
            turns.push(Utterance { speaker: Speaker::Seeker, text: greeting, item_ids: vec![] });
            let reply = [
                "hi what kind of movie are you looking for",
                "hello any genre in mind today",
            ][rng.gen_range(0..2)]
            .to_string();
            turns.push(Utterance { speaker: Speaker::Recommender, text: reply, item_ids: vec![] });
            turns.push(seeker_ask(&mut rng, &genre, &topic));
        } else {
            // Mention some other item as watched history, then ask.
            let mut other = rng.gen_range(0..n_items);
            if other == target_idx {
                other = (other + 1) % n_items;
            }
            let text = format!("i loved [ITEM] please suggest another {genre} movie about {topic}");
            turns.push(Utterance {
                speaker: Speaker::Seeker,
                text,
                item_ids: vec![items[other].id],
            });
        }
        turns.push(recommender_reply(&mut rng, item.id, &genre, &topic));
        dialogues.push((format!("synth-{d:05}"), turns));
    }

    Ok((items, dialogues))
}

fn seeker_ask(rng: &mut ChaCha20Rng, genre: &str, topic: &str) -> Utterance {
    let text = match rng.gen_range(0..3u32) {
        0 => format!("hi i am looking for a {genre} movie about {topic}"),
        1 => format!("hello i want to watch a {genre} film about {topic}"),
        _ => format!("can you suggest a {genre} movie with {topic} in it"),
    };
    Utterance { speaker: Speaker::Seeker, text, item_ids: vec![] }
}

fn recommender_reply(rng: &mut ChaCha20Rng, item_id: u32, genre: &str, topic: &str) -> Utterance {
    let text = match rng.gen_range(0..3u32) {
        0 => format!("you should watch [ITEM] it is a great {genre} movie"),
        1 => format!("i recommend [ITEM] a fine {genre} film about {topic}"),
        _ => format!("try [ITEM] it is a {genre} classic"),
    };
    Utterance { speaker: Speaker::Recommender, text, item_ids: vec![item_id] }
}

/// The generator's own keyword map: (genre, topic) -> item id.
pub fn keyword_oracle(items: &[ItemRecord]) -> HashMap<(String, String), u32> {
    let mut map = HashMap::new();
    for item in items {
        let genre = item.genres[0].clone();
        let topic = item.plot.split_whitespace().nth(4).unwrap_or("").to_string();
        map.insert((genre, topic), item.id);
    }
    map
}

/// Rule-based prediction from seeker utterances: find a genre word and a
/// topic word that form a known pair.
pub fn oracle_predict(
    map: &HashMap<(String, String), u32>,
    example: &DialogueExample,
) -> Option<u32> {
    for utt in &example.context {
        if utt.speaker != Speaker::Seeker {
            continue;
        }
        let words: Vec<&str> = utt.text.split_whitespace().collect();
        for genre in GENRES {
            if !words.contains(&genre) {
                continue;
            }
            for w in &words {
                if let Some(&id) = map.get(&(genre.to_string(), w.to_string())) {
                    return Some(id);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dialogues, load_item_bank, write_dialogues, write_item_bank, ItemBank};

    #[test]
    fn deterministic_under_fixed_seed() {
        let a = generate_synthetic_corpus(10, 5, 0).unwrap();
        let b = generate_synthetic_corpus(10, 5, 0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic_corpus(10, 5, 0).unwrap();
        let b = generate_synthetic_corpus(10, 5, 1).unwrap();
        assert!(a.1 != b.1 || a.0 != b.0);
    }

    #[test]
    fn oracle_reaches_perfect_recall_on_own_output() {
        let (items, dialogues) = generate_synthetic_corpus(40, 120, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items_path = dir.path().join("items.jsonl");
        let dials_path = dir.path().join("dialogues.jsonl");
        write_item_bank(&items_path, &items).unwrap();
        write_dialogues(&dials_path, &dialogues).unwrap();
        let bank = load_item_bank(&items_path).unwrap();
        let examples = load_dialogues(&dials_path, &bank).unwrap();

        let map = keyword_oracle(&items);
        let mut checked = 0;
        for ex in &examples {
            if let Some(truth) = ex.target_item {
                assert_eq!(oracle_predict(&map, ex), Some(truth), "dialogue {}", ex.dialogue_id);
                checked += 1;
            }
        }
        assert!(checked >= 120);
    }

    #[test]
    fn two_items_both_appear_as_targets() {
        let (_items, dialogues) = generate_synthetic_corpus(2, 5, 3).unwrap();
        let targets: std::collections::BTreeSet<u32> = dialogues
            .iter()
            .flat_map(|(_, turns)| turns.iter().flat_map(|t| t.item_ids.clone()))
            .collect();
        assert!(targets.contains(&0) && targets.contains(&1));
    }

    #[test]
    fn output_loads_cleanly() {
        let (items, dialogues) = generate_synthetic_corpus(16, 30, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items_path = dir.path().join("items.jsonl");
        let dials_path = dir.path().join("dialogues.jsonl");
        write_item_bank(&items_path, &items).unwrap();
        write_dialogues(&dials_path, &dialogues).unwrap();
        let bank = load_item_bank(&items_path).unwrap();
        assert_eq!(bank.len(), 16);
        let examples = load_dialogues(&dials_path, &bank).unwrap();
        assert!(examples.len() >= 30);
        assert!(examples.iter().all(|e| e.target.speaker == Speaker::Recommender));
    }

    #[test]
    fn unique_genre_topic_pairs() {
        let (items, _) = generate_synthetic_corpus(200, 1, 0).unwrap();
        let map = keyword_oracle(&items);
        assert_eq!(map.len(), 200);
        let _ = ItemBank::new(items).unwrap();
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(generate_synthetic_corpus(1, 5, 0).is_err());
        assert!(generate_synthetic_corpus(5, 0, 0).is_err());
    }
}
