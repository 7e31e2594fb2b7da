//! Decoding strategies: greedy, length-normalized beam search, grouped
//! diverse beam search with a Hamming penalty, top-k sampling, and nucleus
//! sampling. Sampling strategies are deterministic under the config seed.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{DecodingConfig, Strategy};
use crate::backbone::{forward, BackboneParams, ForwardOpts, LogitRows, TokenStream};
use crate::data::tokenizer::SpecialIds;
use crate::error::ModelError;

fn last_row_logprobs(
    backbone: &BackboneParams,
    stream: &TokenStream,
) -> Result<Vec<f64>, ModelError> {
    let t = stream.len();
    let out = forward(
        backbone,
        stream,
        ForwardOpts { dropout_rng: None, record: false, logit_rows: LogitRows::Range(t - 1, t) },
    )?;
    let (_, logits) = out.logits.unwrap();
    let row = logits.row(0);
    let row = row.as_slice().unwrap();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(row.iter().map(|&x| x - logz).collect())
}

/// Token indices ordered by descending log-probability, ties by ascending id.
fn ranked(logprobs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logprobs.len()).collect();
    idx.sort_by(|&a, &b| logprobs[b].partial_cmp(&logprobs[a]).unwrap().then(a.cmp(&b)));
    idx
}

fn with_tokens(input: &TokenStream, tokens: &[u32]) -> TokenStream {
    let mut s = input.clone();
    for &t in tokens {
        s.push_token(t);
    }
    s
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    sum_lp: f64,
    finished: bool,
}

impl Beam {
    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.sum_lp / self.tokens.len() as f64
        } else {
            self.sum_lp
        }
    }
}

fn sort_beams(beams: &mut [Beam], length_normalize: bool) {
    beams.sort_by(|a, b| {
        b.score(length_normalize)
            .partial_cmp(&a.score(length_normalize))
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

fn strip_eot(mut tokens: Vec<u32>, eot: u32) -> Vec<u32> {
    if tokens.last() == Some(&eot) {
        tokens.pop();
    }
    tokens
}

fn sample_index(probs: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn greedy_or_sampling(
    backbone: &BackboneParams,
    input: &TokenStream,
    cfg: &DecodingConfig,
    special: SpecialIds,
) -> Result<Vec<u32>, ModelError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut stream = input.clone();
    let mut generated = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let lp = last_row_logprobs(backbone, &stream)?;
        let tok = match cfg.strategy {
            Strategy::Greedy => ranked(&lp)[0] as u32,
            Strategy::TopK => {
                let idx = ranked(&lp);
                let k = cfg.k.min(idx.len());
                let max = lp[idx[0]];
                let mut probs: Vec<f64> = idx[..k].iter().map(|&i| (lp[i] - max).exp()).collect();
                let z: f64 = probs.iter().sum();
                for p in probs.iter_mut() {
                    *p /= z;
                }
                idx[sample_index(&probs, &mut rng)] as u32
            }
            Strategy::Nucleus => {
                let idx = ranked(&lp);
                let mut cut = idx.len();
                let mut cum = 0.0;
                for (pos, &i) in idx.iter().enumerate() {
                    cum += lp[i].exp();
                    if cum >= cfg.p {
                        cut = pos + 1;
                        break;
                    }
                }
                let mut probs: Vec<f64> = idx[..cut].iter().map(|&i| lp[i].exp()).collect();
                let z: f64 = probs.iter().sum();
                for p in probs.iter_mut() {
                    *p /= z;
                }
                idx[sample_index(&probs, &mut rng)] as u32
            }
            _ => unreachable!(),
        };
        if tok == special.eot {
            break;
        }
        generated.push(tok);
        stream.push_token(tok);
    }
    Ok(generated)
}

fn beam_search(
    backbone: &BackboneParams,
    input: &TokenStream,
    cfg: &DecodingConfig,
    special: SpecialIds,
) -> Result<Vec<u32>, ModelError> {
    let width = cfg.beam_width;
    let mut beams = vec![Beam { tokens: Vec::new(), sum_lp: 0.0, finished: false }];
    for _ in 0..cfg.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam> = beams.iter().filter(|b| b.finished).cloned().collect();
        for beam in beams.iter().filter(|b| !b.finished) {
            let lp = last_row_logprobs(backbone, &with_tokens(input, &beam.tokens))?;
            for &tok in ranked(&lp).iter().take(width) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Beam {
                    tokens,
                    sum_lp: beam.sum_lp + lp[tok],
                    finished: tok as u32 == special.eot,
                });
            }
        }
        sort_beams(&mut candidates, cfg.length_normalize);
        candidates.truncate(width);
        beams = candidates;
    }
    sort_beams(&mut beams, cfg.length_normalize);
    Ok(strip_eot(beams.remove(0).tokens, special.eot))
}

fn diverse_beam_search(
    backbone: &BackboneParams,
    input: &TokenStream,
    cfg: &DecodingConfig,
    special: SpecialIds,
) -> Result<Vec<u32>, ModelError> {
    let n_groups = cfg.n_groups;
    let gw = cfg.beam_width / n_groups;
    let mut groups: Vec<Vec<Beam>> =
        (0..n_groups).map(|_| vec![Beam { tokens: Vec::new(), sum_lp: 0.0, finished: false }]).collect();

    for _ in 0..cfg.max_new_tokens {
        if groups.iter().flatten().all(|b| b.finished) {
            break;
        }
        // Tokens chosen by earlier groups at this step incur the penalty.
        let mut chosen: HashMap<u32, f64> = HashMap::new();
        for group in groups.iter_mut() {
            let mut candidates: Vec<Beam> = group.iter().filter(|b| b.finished).cloned().collect();
            for beam in group.iter().filter(|b| !b.finished) {
                let lp = last_row_logprobs(backbone, &with_tokens(input, &beam.tokens))?;
                let penalized: Vec<f64> = lp
                    .iter()
                    .enumerate()
                    .map(|(tok, &v)| {
                        v - cfg.diversity_penalty * chosen.get(&(tok as u32)).copied().unwrap_or(0.0)
                    })
                    .collect();
                for &tok in ranked(&penalized).iter().take(gw) {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(tok as u32);
                    candidates.push(Beam {
                        // scores carry the true log-probability; only the
                        // selection uses the penalty
                        tokens,
                        sum_lp: beam.sum_lp + lp[tok],
                        finished: tok as u32 == special.eot,
                    });
                }
            }
            sort_beams(&mut candidates, cfg.length_normalize);
            candidates.truncate(gw);
            for beam in candidates.iter().filter(|b| !b.finished) {
                if let Some(&tok) = beam.tokens.last() {
                    *chosen.entry(tok).or_insert(0.0) += 1.0;
                }
            }
            *group = candidates;
        }
    }
    let mut all: Vec<Beam> = groups.into_iter().flatten().collect();
    sort_beams(&mut all, cfg.length_normalize);
    Ok(strip_eot(all.remove(0).tokens, special.eot))
}

/// Decodes a response for the given prompt stream. Halts at end-of-text or
/// after `max_new_tokens`.
pub fn generate(
    backbone: &BackboneParams,
    input: &TokenStream,
    cfg: &DecodingConfig,
    special: SpecialIds,
) -> Result<Vec<u32>, ModelError> {
    cfg.validate()?;
    let mut input = input.clone();
    if input.is_empty() {
        input.push_token(special.eot);
    }
    match cfg.strategy {
        Strategy::Greedy | Strategy::TopK | Strategy::Nucleus => {
            greedy_or_sampling(backbone, &input, cfg, special)
        }
        Strategy::Beam => beam_search(backbone, &input, cfg, special),
        Strategy::DiverseBeam => diverse_beam_search(backbone, &input, cfg, special),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};

    fn setup() -> (BackboneParams, SpecialIds) {
        let backbone = BackboneParams::init(BackboneConfig::tiny(24), 19).unwrap();
        (backbone, SpecialIds { item: 18, sep: 19, rec: 20, rec_end: 21, pad: 22, eot: 23 })
    }

    fn cfg(strategy: Strategy) -> DecodingConfig {
        DecodingConfig { strategy, max_new_tokens: 8, ..Default::default() }
    }

    #[test]
    fn top_k_one_equals_greedy() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[1, 2, 3]);
        let greedy = generate(&backbone, &input, &cfg(Strategy::Greedy), special).unwrap();
        for seed in [0u64, 7, 123] {
            let mut c = cfg(Strategy::TopK);
            c.k = 1;
            c.seed = seed;
            assert_eq!(generate(&backbone, &input, &c, special).unwrap(), greedy);
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let (backbone, special) = setup();
        for start in [vec![1u32, 2], vec![5, 9, 3], vec![7]] {
            let input = TokenStream::from_tokens(&start);
            let greedy = generate(&backbone, &input, &cfg(Strategy::Greedy), special).unwrap();
            let mut c = cfg(Strategy::Beam);
            c.beam_width = 1;
            assert_eq!(generate(&backbone, &input, &c, special).unwrap(), greedy);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[4, 2]);
        for strategy in [Strategy::TopK, Strategy::Nucleus] {
            let mut c = cfg(strategy);
            c.seed = 41;
            let a = generate(&backbone, &input, &c, special).unwrap();
            let b = generate(&backbone, &input, &c, special).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nucleus_below_max_prob_is_greedy() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[1, 2, 3]);
        let greedy = generate(&backbone, &input, &cfg(Strategy::Greedy), special).unwrap();
        let mut c = cfg(Strategy::Nucleus);
        c.p = 1e-9;
        assert_eq!(generate(&backbone, &input, &c, special).unwrap(), greedy);
    }

    #[test]
    fn generation_halts_within_budget() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[1]);
        for strategy in
            [Strategy::Greedy, Strategy::Beam, Strategy::DiverseBeam, Strategy::TopK, Strategy::Nucleus]
        {
            let mut c = cfg(strategy);
            c.max_new_tokens = 5;
            let out = generate(&backbone, &input, &c, special).unwrap();
            assert!(out.len() <= 5, "{strategy:?} produced {}", out.len());
        }
    }

    #[test]
    fn diverse_beam_validates_group_split() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[1]);
        let mut c = cfg(Strategy::DiverseBeam);
        c.beam_width = 4;
        c.n_groups = 3;
        assert!(generate(&backbone, &input, &c, special).is_err());
        c.n_groups = 2;
        assert!(generate(&backbone, &input, &c, special).is_ok());
    }

    #[test]
    fn beam_and_diverse_beam_are_deterministic() {
        let (backbone, special) = setup();
        let input = TokenStream::from_tokens(&[3, 1]);
        for strategy in [Strategy::Beam, Strategy::DiverseBeam] {
            let c = cfg(strategy);
            let a = generate(&backbone, &input, &c, special).unwrap();
            let b = generate(&backbone, &input, &c, special).unwrap();
            assert_eq!(a, b);
        }
    }
}
