//! Recommendation and generation metrics. All functions are pure and
//! deterministic.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::ItemBank;
use crate::error::ModelError;

/// Fraction of examples whose ground-truth item appears in the top K of its
/// ranking. Only examples with a ground truth are counted; rankings and
/// truths are parallel slices.
pub fn recall_at_k(rankings: &[Vec<u32>], truths: &[u32], k: usize) -> Result<f64, ModelError> {
    if k < 1 {
        return Err(ModelError::Invalid("recall@k needs k >= 1".into()));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(ranking, truth)| ranking.iter().take(k).any(|id| id == *truth))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Number of distinct top-1 predictions.
pub fn unique_items(rankings: &[Vec<u32>]) -> usize {
    rankings.iter().filter_map(|r| r.first()).collect::<HashSet<_>>().len()
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n || n == 0 {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

/// Clipped n-gram overlap: (precision, recall, f1).
pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> (f64, f64, f64) {
    let hyp = ngrams(&normalize_tokens(hypothesis), n);
    let refr = ngrams(&normalize_tokens(reference), n);
    if hyp.is_empty() || refr.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    for g in &refr {
        *ref_counts.entry(g.as_slice()).or_insert(0) += 1;
    }
    let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
    for g in &hyp {
        *hyp_counts.entry(g.as_slice()).or_insert(0) += 1;
    }
    let overlap: usize = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / refr.len() as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistinctVariant {
    /// distinct n-grams / total n-grams over the corpus (always <= 1).
    Ratio,
    /// distinct n-grams / number of responses (can exceed 1).
    PerSentence,
}

pub fn distinct_n(responses: &[String], n: usize, variant: DistinctVariant) -> f64 {
    let mut distinct: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(&normalize_tokens(r), n) {
            total += 1;
            distinct.insert(g);
        }
    }
    match variant {
        DistinctVariant::Ratio => {
            if total == 0 {
                0.0
            } else {
                distinct.len() as f64 / total as f64
            }
        }
        DistinctVariant::PerSentence => {
            if responses.is_empty() {
                0.0
            } else {
                distinct.len() as f64 / responses.len() as f64
            }
        }
    }
}

/// F1 of the positive (recommend) class. With no positives anywhere the
/// decision is vacuously perfect.
pub fn item_decision_f1(predicted: &[bool], truth: &[bool]) -> f64 {
    debug_assert_eq!(predicted.len(), truth.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        if fp == 0 && fne == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fne as f64)
    }
}

/// exp of the mean per-token negative log-likelihood.
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Recall@50 within groups of examples sharing a prior-utterance count.
pub fn per_turn_breakdown(
    rankings: &[Vec<u32>],
    truths: &[u32],
    context_turn_counts: &[usize],
) -> BTreeMap<usize, f64> {
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((ranking, truth), &turns) in rankings.iter().zip(truths).zip(context_turn_counts) {
        let entry = hits.entry(turns).or_insert((0, 0));
        entry.1 += 1;
        if ranking.iter().take(50).any(|id| id == truth) {
            entry.0 += 1;
        }
    }
    hits.into_iter().map(|(turns, (hit, total))| (turns, hit as f64 / total as f64)).collect()
}

/// Genre agreement over wrong top-1 predictions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenreAccuracy {
    /// Fraction of wrong predictions whose primary genre matches the
    /// truth's; None when every prediction was correct or unusable.
    pub accuracy: Option<f64>,
    /// Wrong predictions with genres on both sides.
    pub counted: usize,
    /// Wrong predictions skipped because an item lacks genre tags.
    pub excluded: usize,
}

pub fn genre_accuracy(top1: &[u32], truths: &[u32], bank: &ItemBank) -> GenreAccuracy {
    let mut matches = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (&pred, &truth) in top1.iter().zip(truths) {
        if pred == truth {
            continue;
        }
        let pg = bank.get(pred).and_then(|i| i.primary_genre());
        let tg = bank.get(truth).and_then(|i| i.primary_genre());
        match (pg, tg) {
            (Some(pg), Some(tg)) => {
                counted += 1;
                if pg == tg {
                    matches += 1;
                }
            }
            _ => excluded += 1,
        }
    }
    GenreAccuracy {
        accuracy: if counted > 0 { Some(matches as f64 / counted as f64) } else { None },
        counted,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;

    fn ranking(ids: &[u32]) -> Vec<u32> {
        ids.to_vec()
    }

    #[test]
    fn recall_counts_by_rank() {
        // truths at ranks 1, 12, 60 of 70-item rankings
        let base: Vec<u32> = (0..70).collect();
        let rankings = vec![ranking(&base), ranking(&base), ranking(&base)];
        let truths = vec![0u32, 11, 59];
        assert!((recall_at_k(&rankings, &truths, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&rankings, &truths, 10).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&rankings, &truths, 50).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(recall_at_k(&rankings, &truths, 0).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let rankings = vec![ranking(&[3, 1, 2]), ranking(&[2, 3, 1]), ranking(&[1, 2, 3])];
        let truths = vec![1, 1, 3];
        let mut last = 0.0;
        for k in 1..=3 {
            let r = recall_at_k(&rankings, &truths, k).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn unique_counts_distinct_top1() {
        let rankings = vec![ranking(&[1, 2]), ranking(&[2, 1]), ranking(&[2, 3]), ranking(&[3, 1])];
        assert_eq!(unique_items(&rankings), 3);
        let same = vec![ranking(&[3]); 5];
        assert_eq!(unique_items(&same), 1);
    }

    #[test]
    fn rouge_hand_counted() {
        let (p, r, f1) = rouge_n("the movie is great", "the movie was great", 1);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 0.75).abs() < 1e-12);
        assert!((f1 - 0.75).abs() < 1e-12);

        let (p, r, f1) = rouge_n("same text here", "same text here", 1);
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));

        assert_eq!(rouge_n("aa bb", "cc dd", 1), (0.0, 0.0, 0.0));
        assert_eq!(rouge_n("", "anything", 1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rouge_swaps_precision_and_recall() {
        let (p, r, _) = rouge_n("a b c d", "a b", 1);
        let (p2, r2, _) = rouge_n("a b", "a b c d", 1);
        assert!((p - r2).abs() < 1e-12);
        assert!((r - p2).abs() < 1e-12);
    }

    #[test]
    fn distinct_both_variants() {
        let responses = vec!["a b c".to_string(), "a b d".to_string()];
        let ratio = distinct_n(&responses, 2, DistinctVariant::Ratio);
        assert!((ratio - 0.75).abs() < 1e-12);
        let per = distinct_n(&responses, 2, DistinctVariant::PerSentence);
        assert!((per - 1.5).abs() < 1e-12);
        // single-token responses have no bigrams
        let singles = vec!["x".to_string(), "x".to_string()];
        assert_eq!(distinct_n(&singles, 2, DistinctVariant::Ratio), 0.0);
        assert_eq!(distinct_n(&singles, 2, DistinctVariant::PerSentence), 0.0);
    }

    #[test]
    fn decision_f1_cases() {
        assert_eq!(item_decision_f1(&[true, false, true], &[true, false, true]), 1.0);
        // TP=2, FP=1, FN=1
        let pred = [true, true, true, false, false];
        let truth = [true, true, false, true, false];
        let f1 = item_decision_f1(&pred, &truth);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-9);
        // never recommends but positives exist
        assert_eq!(item_decision_f1(&[false, false], &[true, false]), 0.0);
        // vacuous
        assert_eq!(item_decision_f1(&[false], &[false]), 1.0);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(4.0_f64.ln()) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn per_turn_buckets() {
        let base: Vec<u32> = (0..60).collect();
        let rankings = vec![ranking(&base); 4];
        let truths = vec![0u32, 55, 1, 2]; // hit, miss, hit, hit
        let turns = vec![1, 1, 3, 3];
        let map = per_turn_breakdown(&rankings, &truths, &turns);
        assert!((map[&1] - 0.5).abs() < 1e-12);
        assert!((map[&3] - 1.0).abs() < 1e-12);
        // weighted mean equals global R@50
        let global = recall_at_k(&rankings, &truths, 50).unwrap();
        let weighted = (map[&1] * 2.0 + map[&3] * 2.0) / 4.0;
        assert!((global - weighted).abs() < 1e-12);
    }

    fn genre_bank() -> ItemBank {
        ItemBank::new(vec![
            item(0, Some("action")),
            item(1, Some("action")),
            item(2, Some("drama")),
            item(3, None),
        ])
        .unwrap()
    }

    fn item(id: u32, genre: Option<&str>) -> ItemRecord {
        ItemRecord {
            id,
            title: format!("t{id}"),
            actors: vec![],
            directors: vec![],
            genres: genre.map(|g| vec![g.to_string()]).unwrap_or_default(),
            plot: String::new(),
            description: String::new(),
        }
    }

    #[test]
    fn genre_accuracy_cases() {
        let bank = genre_bank();
        // two wrong predictions, one genre-matching
        let got = genre_accuracy(&[1, 2], &[0, 0], &bank);
        assert_eq!(got.accuracy, Some(0.5));
        assert_eq!(got.counted, 2);
        // all correct -> None with zero counted
        let got = genre_accuracy(&[0, 1], &[0, 1], &bank);
        assert_eq!(got.accuracy, None);
        assert_eq!(got.counted, 0);
        // genreless items are excluded but tallied
        let got = genre_accuracy(&[3], &[0], &bank);
        assert_eq!(got.accuracy, None);
        assert_eq!(got.excluded, 1);
    }
}
