//! Retrieval similarity scoring, the recall (NCE) and re-rank losses, and
//! the shared projection/scoring heads f and g.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{HeadsGrads, RetrievalHeadsParams};
use crate::backbone::{forward, BackboneParams, ForwardOpts, TokenStream};
use crate::error::ModelError;

const NORM_FLOOR: f64 = 1e-30;

/// Retrieval similarity: negated angular distance by default, or raw cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    NegAngular,
    Cosine,
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Angular distance sqrt(2 (1 - cos)): 0 for parallel, 2 for antiparallel.
pub fn angular_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (2.0 * (1.0 - cosine(a, b))).max(0.0).sqrt()
}

pub fn score_value(kind: ScoreKind, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    match kind {
        ScoreKind::NegAngular => -angular_distance(a, b),
        ScoreKind::Cosine => cosine(a, b),
    }
}

/// d(score)/da and d(score)/db, scaled by `upstream`.
pub fn score_backward(
    kind: ScoreKind,
    a: &Array1<f64>,
    b: &Array1<f64>,
    upstream: f64,
) -> (Array1<f64>, Array1<f64>) {
    let d = a.len();
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return (Array1::zeros(d), Array1::zeros(d));
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    // chain through the chosen score
    let ds_dc = match kind {
        ScoreKind::Cosine => 1.0,
        ScoreKind::NegAngular => {
            let delta = (2.0 * (1.0 - c)).max(0.0);
            if delta <= 1e-24 {
                0.0 // at the cusp: the score is at its maximum
            } else {
                1.0 / delta.sqrt()
            }
        }
    };
    let scale = upstream * ds_dc;
    // dc/da = b/(na nb) - c a/na^2 ; symmetric for b.
    let mut da = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    for i in 0..d {
        da[i] = scale * (b[i] / (na * nb) - c * a[i] / (na * na));
        db[i] = scale * (a[i] / (na * nb) - c * b[i] / (nb * nb));
    }
    (da, db)
}

pub struct FCache {
    pub input: Array1<f64>,
    pub h_pre: Array1<f64>,
    pub h: Array1<f64>,
    pub out: Array1<f64>,
}

/// Projection head f: relu(x W1 + b1) W2 + b2.
pub fn f_forward(heads: &RetrievalHeadsParams, x: &Array1<f64>) -> FCache {
    let h_pre = x.dot(&heads.f1_w) + &heads.f1_b;
    let h = h_pre.mapv(|v| v.max(0.0));
    let out = h.dot(&heads.f2_w) + &heads.f2_b;
    FCache { input: x.clone(), h_pre, h, out }
}

/// Backward through f; accumulates parameter grads and returns dx.
pub fn f_backward(
    heads: &RetrievalHeadsParams,
    cache: &FCache,
    d_out: &Array1<f64>,
    grads: &mut HeadsGrads,
) -> Array1<f64> {
    let d = d_out.len();
    // out = h W2 + b2
    for m in 0..d {
        let hm = cache.h[m];
        let mut row = grads.f2_w.row_mut(m);
        for k in 0..d {
            row[k] += hm * d_out[k];
        }
    }
    grads.f2_b += d_out;
    let mut dh = heads.f2_w.dot(d_out); // (d_in) since f2_w is d_in x d_out
    for m in 0..d {
        if cache.h_pre[m] <= 0.0 {
            dh[m] = 0.0;
        }
    }
    for m in 0..d {
        let xm = cache.input[m];
        let mut row = grads.f1_w.row_mut(m);
        for k in 0..d {
            row[k] += xm * dh[k];
        }
    }
    grads.f1_b += &dh;
    heads.f1_w.dot(&dh)
}

/// Scoring head g: a single linear map to one logit.
pub fn g_forward(heads: &RetrievalHeadsParams, q: &Array1<f64>) -> f64 {
    q.dot(&heads.g_w) + heads.g_b[0]
}

pub fn g_backward(
    heads: &RetrievalHeadsParams,
    q: &Array1<f64>,
    d_r: f64,
    grads: &mut HeadsGrads,
) -> Array1<f64> {
    grads.g_w.scaled_add(d_r, q);
    grads.g_b[0] += d_r;
    heads.g_w.mapv(|w| w * d_r)
}

/// Runs the backbone over a context stream (which must end with the [REC]
/// query slot) and scores one item vector against the projected query.
pub fn retrieval_score(
    backbone: &BackboneParams,
    heads: &RetrievalHeadsParams,
    kind: ScoreKind,
    stream: &TokenStream,
    item_vector: &Array1<f64>,
) -> Result<f64, ModelError> {
    let out = forward(backbone, stream, ForwardOpts::inference())?;
    let d_t = out.hidden.row(stream.len() - 1).to_owned();
    let u = f_forward(heads, &d_t).out;
    Ok(score_value(kind, &u, item_vector))
}

/// NCE recall loss: -log( e^{s_p} / (e^{s_p} + sum_j e^{s'_j}) ).
pub fn recall_loss(score_positive: f64, scores_negative: &[f64]) -> Result<f64, ModelError> {
    if score_positive.is_nan() || scores_negative.iter().any(|s| s.is_nan()) {
        return Err(ModelError::Invalid("NaN score in recall loss".into()));
    }
    let mut max = score_positive;
    for &s in scores_negative {
        if s > max {
            max = s;
        }
    }
    let mut z = (score_positive - max).exp();
    for &s in scores_negative {
        z += (s - max).exp();
    }
    Ok(-(score_positive - max) + z.ln())
}

/// Recall loss plus d/ds_p and d/ds'_j.
pub fn recall_loss_grads(
    score_positive: f64,
    scores_negative: &[f64],
) -> Result<(f64, f64, Vec<f64>), ModelError> {
    let loss = recall_loss(score_positive, scores_negative)?;
    let mut max = score_positive;
    for &s in scores_negative {
        if s > max {
            max = s;
        }
    }
    let ep = (score_positive - max).exp();
    let mut z = ep;
    let negs_exp: Vec<f64> = scores_negative
        .iter()
        .map(|&s| {
            let e = (s - max).exp();
            z += e;
            e
        })
        .collect();
    let d_pos = ep / z - 1.0;
    let d_negs = negs_exp.into_iter().map(|e| e / z).collect();
    Ok((loss, d_pos, d_negs))
}

/// Cross-entropy of softmax(scores) against the one-hot positive.
pub fn rerank_loss(scores: &[f64], positive_index: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    -(scores[positive_index] - max) + z.ln()
}

/// Re-rank loss plus d/ds_j (softmax minus one-hot).
pub fn rerank_loss_grads(scores: &[f64], positive_index: usize) -> (f64, Vec<f64>) {
    let loss = rerank_loss(scores, positive_index);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut grads: Vec<f64> = exps.into_iter().map(|e| e / z).collect();
    grads[positive_index] -= 1.0;
    (loss, grads)
}

/// Scores candidates against the context under the re-rank mask, evaluated
/// in chunks of at most `chunk` candidates per forward pass. Candidate
/// independence makes chunked and single-pass scores identical.
pub fn rerank_scores(
    backbone: &BackboneParams,
    heads: &RetrievalHeadsParams,
    stream: &TokenStream,
    candidates: &[Array1<f64>],
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    let ctx_len = stream.len();
    let max = backbone.config.max_positions;
    if chunk == 0 && ctx_len + candidates.len() > max {
        return Err(ModelError::StreamTooLong { len: ctx_len + candidates.len(), max });
    }
    let chunk = if chunk == 0 { candidates.len().max(1) } else { chunk };
    let mut out = Vec::with_capacity(candidates.len());
    for group in candidates.chunks(chunk) {
        let s = stream.with_candidates(group);
        let fwd = forward(backbone, &s, ForwardOpts::inference())?;
        for (c, _) in group.iter().enumerate() {
            let h = fwd.hidden.row(ctx_len + c).to_owned();
            let q = f_forward(heads, &h).out;
            out.push(g_forward(heads, &q));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn v(values: &[f64]) -> Array1<f64> {
        Array1::from(values.to_vec())
    }

    #[test]
    fn score_extremes_match_geometry() {
        let a = v(&[1.0, 0.0]);
        let parallel = v(&[2.5, 0.0]);
        let orthogonal = v(&[0.0, 3.0]);
        let antiparallel = v(&[-4.0, 0.0]);
        assert!((score_value(ScoreKind::NegAngular, &a, &parallel) - 0.0).abs() < 1e-12);
        assert!(
            (score_value(ScoreKind::NegAngular, &a, &orthogonal) + 2.0_f64.sqrt()).abs() < 1e-12
        );
        assert!((score_value(ScoreKind::NegAngular, &a, &antiparallel) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_scores_as_orthogonal() {
        let a = v(&[1.0, 2.0]);
        let zero = v(&[0.0, 0.0]);
        assert_eq!(cosine(&a, &zero), 0.0);
        assert!((score_value(ScoreKind::NegAngular, &a, &zero) + 2.0_f64.sqrt()).abs() < 1e-12);
        let (da, db) = score_backward(ScoreKind::NegAngular, &a, &zero, 1.0);
        assert!(da.iter().all(|&x| x == 0.0) && db.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn score_is_scale_invariant_and_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = Array1::from_shape_fn(6, |_| crate::backbone::normal(&mut rng));
            let b = Array1::from_shape_fn(6, |_| crate::backbone::normal(&mut rng));
            let s = score_value(ScoreKind::NegAngular, &a, &b);
            assert!((-2.0..=0.0).contains(&s));
            let s2 = score_value(ScoreKind::NegAngular, &(&a * 3.7), &(&b * 0.2));
            assert!((s - s2).abs() < 1e-9);
        }
        let a = v(&[0.3, -1.2, 0.7]);
        assert!(score_value(ScoreKind::NegAngular, &a, &a).abs() < 1e-7);
    }

    #[test]
    fn recall_loss_hand_computed_cases() {
        assert!((recall_loss(0.0, &[]).unwrap() - 0.0).abs() < 1e-12);
        let loss = recall_loss(0.0, &[-2.0]).unwrap();
        assert!((loss - 0.126928).abs() < 1e-6);
        assert!(recall_loss(f64::NAN, &[]).is_err());
        assert!(recall_loss(0.0, &[f64::NAN]).is_err());
    }

    #[test]
    fn recall_loss_monotone_in_positive_score() {
        let negs = [-1.0, -0.5, -1.5];
        let l1 = recall_loss(-1.0, &negs).unwrap();
        let l2 = recall_loss(-0.5, &negs).unwrap();
        assert!(l2 < l1);
        // permutation invariance
        let shuffled = [-0.5, -1.5, -1.0];
        assert!((recall_loss(-1.0, &negs).unwrap() - recall_loss(-1.0, &shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rerank_loss_hand_computed_cases() {
        let uniform = [1.0; 5];
        assert!((rerank_loss(&uniform, 2) - 5.0_f64.ln()).abs() < 1e-12);
        let saturated = [50.0, 0.0, 0.0];
        assert!(rerank_loss(&saturated, 0) < 1e-9);
        let scores = [2.0, 1.0, 0.0];
        assert!((rerank_loss(&scores, 0) - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn rerank_loss_invariant_under_joint_shuffle() {
        let scores = [0.2, -1.0, 0.7, 0.1];
        let base = rerank_loss(&scores, 2);
        let perm = [2usize, 0, 3, 1];
        let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let new_pos = perm.iter().position(|&i| i == 2).unwrap();
        assert!((rerank_loss(&shuffled, new_pos) - base).abs() < 1e-12);
    }

    #[test]
    fn recall_grads_match_finite_differences() {
        let negs = vec![-0.4, -1.1, 0.2];
        let (_, d_pos, d_negs) = recall_loss_grads(-0.3, &negs).unwrap();
        let eps = 1e-7;
        let fd_pos = (recall_loss(-0.3 + eps, &negs).unwrap()
            - recall_loss(-0.3 - eps, &negs).unwrap())
            / (2.0 * eps);
        assert!((fd_pos - d_pos).abs() < 1e-8);
        for j in 0..negs.len() {
            let mut up = negs.clone();
            up[j] += eps;
            let mut down = negs.clone();
            down[j] -= eps;
            let fd = (recall_loss(-0.3, &up).unwrap() - recall_loss(-0.3, &down).unwrap())
                / (2.0 * eps);
            assert!((fd - d_negs[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn chunked_rerank_equals_single_pass_bitwise() {
        let backbone = BackboneParams::init(BackboneConfig::tiny(24), 21).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let heads = RetrievalHeadsParams::init(backbone.config.d_model, &mut rng);
        let stream = TokenStream::from_tokens(&[1, 2, 3, 20]); // ends with [REC]=20
        let candidates: Vec<Array1<f64>> = (0..7)
            .map(|c| {
                Array1::from_shape_fn(backbone.config.d_model, |i| {
                    ((i + c * 13) as f64 * 0.17).sin() * 0.2
                })
            })
            .collect();
        let single = rerank_scores(&backbone, &heads, &stream, &candidates, 0).unwrap();
        let chunked = rerank_scores(&backbone, &heads, &stream, &candidates, 3).unwrap();
        for (a, b) in single.iter().zip(chunked.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // single candidate score matches its score inside the larger set
        let alone = rerank_scores(&backbone, &heads, &stream, &candidates[2..3], 0).unwrap();
        assert_eq!(alone[0].to_bits(), single[2].to_bits());
    }

    #[test]
    fn f_and_g_backward_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let d = 6;
        let heads = RetrievalHeadsParams::init(d, &mut rng);
        let x = Array1::from_shape_fn(d, |_| crate::backbone::normal(&mut rng));

        // probe loss: sum of weighted f outputs plus g of f
        let loss = |h: &RetrievalHeadsParams, x: &Array1<f64>| {
            let c = f_forward(h, x);
            let mut acc = g_forward(h, &c.out);
            for (i, v) in c.out.iter().enumerate() {
                acc += v * (i as f64 - 2.0) * 0.1;
            }
            acc
        };

        let cache = f_forward(&heads, &x);
        let mut grads = HeadsGrads::zeros(d);
        // d loss / d f_out
        let mut d_out = Array1::from_shape_fn(d, |i| (i as f64 - 2.0) * 0.1);
        let dq = g_backward(&heads, &cache.out, 1.0, &mut grads);
        d_out += &dq;
        let dx = f_backward(&heads, &cache, &d_out, &mut grads);

        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

        let mut h2 = heads.clone();
        h2.f1_w[[1, 2]] += eps;
        let up = loss(&h2, &x);
        h2.f1_w[[1, 2]] -= 2.0 * eps;
        let down = loss(&h2, &x);
        assert!(rel((up - down) / (2.0 * eps), grads.f1_w[[1, 2]]) < 1e-5);

        let mut h3 = heads.clone();
        h3.g_w[3] += eps;
        let up = loss(&h3, &x);
        h3.g_w[3] -= 2.0 * eps;
        let down = loss(&h3, &x);
        assert!(rel((up - down) / (2.0 * eps), grads.g_w[3]) < 1e-5);

        let mut x2 = x.clone();
        x2[4] += eps;
        let up = loss(&heads, &x2);
        x2[4] -= 2.0 * eps;
        let down = loss(&heads, &x2);
        assert!(rel((up - down) / (2.0 * eps), dx[4]) < 1e-5);
    }
}
