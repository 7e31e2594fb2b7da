//! Forward pass over a [`TokenStream`], optionally recording the caches the
//! backward pass needs.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::math::{self, LnCache};
use super::{BackboneParams, Slot, TokenStream, LN_EPS};
use crate::error::ModelError;

/// Which rows of the final hidden state get projected to vocabulary logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    None,
    All,
    /// Half-open row range [start, end).
    Range(usize, usize),
}

pub struct ForwardOpts<'a> {
    /// Some(rng) enables dropout (training mode).
    pub dropout_rng: Option<&'a mut ChaCha20Rng>,
    /// Record caches for a subsequent backward pass.
    pub record: bool,
    pub logit_rows: LogitRows,
}

impl ForwardOpts<'_> {
    pub fn inference() -> ForwardOpts<'static> {
        ForwardOpts { dropout_rng: None, record: false, logit_rows: LogitRows::None }
    }

    pub fn recorded() -> ForwardOpts<'static> {
        ForwardOpts { dropout_rng: None, record: true, logit_rows: LogitRows::None }
    }
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Array2<f64>,
    pub xa_q: Array2<f64>,
    pub xa_v: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per query position: (n_heads, n_allowed_keys) attention weights.
    pub probs: Vec<Array2<f64>>,
    pub attn_drop: Option<Array2<f64>>,
    pub ln2: LnCache,
    pub h1: Array2<f64>,
    pub ffn_drop: Option<Array2<f64>>,
}

pub struct ForwardCache {
    pub(crate) emb_drop: Option<Array2<f64>>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_ln: LnCache,
}

pub struct ForwardOutput {
    /// Final hidden states, one row per slot.
    pub hidden: Array2<f64>,
    /// (first row index, logits) when requested.
    pub logits: Option<(usize, Array2<f64>)>,
    pub cache: Option<ForwardCache>,
}

fn dropout_mask(rng: &mut ChaCha20Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Adds the low-rank adapter contribution: out += scale * xa @ b^T where
/// xa = x @ a^T was precomputed.
fn lora_add(out: &mut Array2<f64>, xa: &Array2<f64>, b: &Array2<f64>, scale: f64) {
    let (t, rank) = xa.dim();
    let d_out = b.nrows();
    debug_assert_eq!(out.dim(), (t, d_out));
    for i in 0..t {
        let xar = xa.row(i);
        let xar = xar.as_slice().unwrap();
        for o in 0..d_out {
            let brow = b.row(o);
            let brow = brow.as_slice().unwrap();
            let mut acc = 0.0;
            for r in 0..rank {
                acc += xar[r] * brow[r];
            }
            out[[i, o]] += scale * acc;
        }
    }
}

/// xa = x @ a^T for a stored rank x d_in.
fn lora_project(x: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows();
    let rank = a.nrows();
    let mut xa = Array2::zeros((t, rank));
    for i in 0..t {
        let xr = x.row(i);
        let xr = xr.as_slice().unwrap();
        for r in 0..rank {
            let ar = a.row(r);
            xa[[i, r]] = math::dot(xr, ar.as_slice().unwrap());
        }
    }
    xa
}

pub fn forward(
    params: &BackboneParams,
    stream: &TokenStream,
    mut opts: ForwardOpts<'_>,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &params.config;
    let t = stream.len();
    let d = cfg.d_model;
    if t == 0 {
        return Err(ModelError::EmptyInput("forward"));
    }
    if t > cfg.max_positions {
        return Err(ModelError::StreamTooLong { len: t, max: cfg.max_positions });
    }
    if stream.mask.len() != t || stream.use_position.len() != t {
        return Err(ModelError::ShapeMismatch {
            op: "forward",
            details: format!(
                "stream {} slots, mask {} rows, {} position flags",
                t,
                stream.mask.len(),
                stream.use_position.len()
            ),
        });
    }
    for i in 0..t {
        if stream.mask.row(i).key_count() == 0 {
            return Err(ModelError::EmptyMaskRow { row: i });
        }
    }

    // Embedding: token lookup or injected vector, plus positional rows for
    // flagged slots.
    let mut x = Array2::zeros((t, d));
    for (i, slot) in stream.slots.iter().enumerate() {
        match slot {
            Slot::Token(id) => {
                if *id as usize >= cfg.vocab_size {
                    return Err(ModelError::Invalid(format!("token id {id} out of vocab")));
                }
                let emb = params.embed_token(*id);
                x.row_mut(i).assign(&emb);
            }
            Slot::Vector(v) => {
                if v.len() != d {
                    return Err(ModelError::ShapeMismatch {
                        op: "forward",
                        details: format!("injected vector of {} at slot {i}, want {d}", v.len()),
                    });
                }
                x.row_mut(i).assign(v);
            }
        }
        if stream.use_position[i] {
            let pos = params.position_embedding.row(i);
            let mut row = x.row_mut(i);
            row += &pos;
        }
    }

    let use_dropout = cfg.dropout > 0.0 && opts.dropout_rng.is_some();
    let make_mask = |rng: &mut Option<&mut ChaCha20Rng>, rows: usize, cols: usize| {
        rng.as_deref_mut().map(|r| dropout_mask(r, rows, cols, cfg.dropout))
    };

    let emb_drop = if use_dropout { make_mask(&mut opts.dropout_rng, t, d) } else { None };
    if let Some(m) = &emb_drop {
        x *= m;
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = 1.0 / (dh as f64).sqrt();
    let lora_scale = cfg.lora_scale();

    let mut layer_caches = Vec::with_capacity(if opts.record { cfg.n_layers } else { 0 });

    for layer in &params.layers {
        let (a, ln1) = math::layer_norm(&x, &layer.norm1.gamma, &layer.norm1.beta, LN_EPS);

        let mut q = math::matmul(&a, &layer.w_q, Some(&layer.b_q));
        let xa_q = lora_project(&a, &layer.lora_q.a);
        lora_add(&mut q, &xa_q, &layer.lora_q.b, lora_scale);

        let k = math::matmul(&a, &layer.w_k, Some(&layer.b_k));

        let mut v = math::matmul(&a, &layer.w_v, Some(&layer.b_v));
        let xa_v = lora_project(&a, &layer.lora_v.a);
        lora_add(&mut v, &xa_v, &layer.lora_v.b, lora_scale);

        // Attention over the per-row allowed keys, accumulated in ascending
        // key order so each row's result is independent of unrelated rows.
        let mut attn_concat = Array2::zeros((t, d));
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(if opts.record { t } else { 0 });
        let qs = q.as_slice().unwrap();
        let ks = k.as_slice().unwrap();
        let vs = v.as_slice().unwrap();
        {
            let cs = attn_concat.as_slice_mut().unwrap();
            let mut scores: Vec<f64> = Vec::new();
            for i in 0..t {
                let row = stream.mask.row(i);
                let n_keys = row.key_count();
                let mut probs_i =
                    if opts.record { Array2::zeros((n_heads, n_keys)) } else { Array2::zeros((0, 0)) };
                for h in 0..n_heads {
                    let off = h * dh;
                    let q_h = &qs[i * d + off..i * d + off + dh];
                    scores.clear();
                    let mut smax = f64::NEG_INFINITY;
                    for j in row.keys() {
                        let k_h = &ks[j * d + off..j * d + off + dh];
                        let s = math::dot(q_h, k_h) * attn_scale;
                        if s > smax {
                            smax = s;
                        }
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - smax).exp();
                        z += *s;
                    }
                    let ctx = &mut cs[i * d + off..i * d + off + dh];
                    for (kk, j) in row.keys().enumerate() {
                        let w = scores[kk] / z;
                        if opts.record {
                            probs_i[[h, kk]] = w;
                        }
                        let v_h = &vs[j * d + off..j * d + off + dh];
                        for (c, vv) in ctx.iter_mut().zip(v_h) {
                            *c += w * vv;
                        }
                    }
                }
                if opts.record {
                    probs.push(probs_i);
                }
            }
        }

        let mut o = math::matmul(&attn_concat, &layer.w_o, Some(&layer.b_o));
        let attn_drop = if use_dropout { make_mask(&mut opts.dropout_rng, t, d) } else { None };
        if let Some(m) = &attn_drop {
            o *= m;
        }
        let x_mid = &x + &o;

        let (b_ln, ln2) = math::layer_norm(&x_mid, &layer.norm2.gamma, &layer.norm2.beta, LN_EPS);
        let h1 = math::matmul(&b_ln, &layer.w_ff1, Some(&layer.b_ff1));
        let a1 = h1.mapv(math::gelu);
        let mut f = math::matmul(&a1, &layer.w_ff2, Some(&layer.b_ff2));
        let ffn_drop = if use_dropout { make_mask(&mut opts.dropout_rng, t, d) } else { None };
        if let Some(m) = &ffn_drop {
            f *= m;
        }
        let x_out = &x_mid + &f;

        if opts.record {
            layer_caches.push(LayerCache {
                ln1,
                a,
                xa_q,
                xa_v,
                q,
                k,
                v,
                probs,
                attn_drop,
                ln2,
                h1,
                ffn_drop,
            });
        }
        x = x_out;
    }

    let (hidden, final_ln) =
        math::layer_norm(&x, &params.final_norm.gamma, &params.final_norm.beta, LN_EPS);

    let logits = match opts.logit_rows {
        LogitRows::None => None,
        LogitRows::All => Some((0, math::matmul(&hidden, &params.w_out, None))),
        LogitRows::Range(start, end) => {
            if start > end || end > t {
                return Err(ModelError::Invalid(format!(
                    "logit rows {start}..{end} out of bounds for {t} slots"
                )));
            }
            let rows = hidden.slice(ndarray::s![start..end, ..]).to_owned();
            Some((start, math::matmul(&rows, &params.w_out, None)))
        }
    };

    let cache =
        if opts.record { Some(ForwardCache { emb_drop, layers: layer_caches, final_ln }) } else { None };

    Ok(ForwardOutput { hidden, logits, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};
    use ndarray::Array1;

    fn tiny_params(seed: u64) -> BackboneParams {
        BackboneParams::init(BackboneConfig::tiny(24), seed).unwrap()
    }

    #[test]
    fn causality_holds_for_token_streams() {
        let params = tiny_params(5);
        let ids: Vec<u32> = vec![1, 2, 3, 4, 5];
        let out_a = forward(&params, &TokenStream::from_tokens(&ids), ForwardOpts::inference())
            .unwrap()
            .hidden;
        let mut edited = ids.clone();
        edited[3] = 9;
        edited[4] = 2;
        let out_b =
            forward(&params, &TokenStream::from_tokens(&edited), ForwardOpts::inference())
                .unwrap()
                .hidden;
        for j in 0..out_a.ncols() {
            assert_eq!(out_a[[0, j]].to_bits(), out_b[[0, j]].to_bits());
            assert_eq!(out_a[[2, j]].to_bits(), out_b[[2, j]].to_bits());
            // position 3 changed
        }
        assert!(out_a.row(3) != out_b.row(3));
    }

    #[test]
    fn swapping_candidates_swaps_their_hiddens_exactly() {
        let params = tiny_params(6);
        let d = params.config.d_model;
        let base = TokenStream::from_tokens(&[1, 2, 3]);
        let va = Array1::from_shape_fn(d, |i| (i as f64 * 0.13).sin());
        let vb = Array1::from_shape_fn(d, |i| (i as f64 * 0.29).cos());

        let ab = base.with_candidates(&[va.clone(), vb.clone()]);
        let ba = base.with_candidates(&[vb, va]);
        let h_ab = forward(&params, &ab, ForwardOpts::inference()).unwrap().hidden;
        let h_ba = forward(&params, &ba, ForwardOpts::inference()).unwrap().hidden;

        for j in 0..d {
            assert_eq!(h_ab[[3, j]].to_bits(), h_ba[[4, j]].to_bits());
            assert_eq!(h_ab[[4, j]].to_bits(), h_ba[[3, j]].to_bits());
            for ctx_row in 0..3 {
                assert_eq!(h_ab[[ctx_row, j]].to_bits(), h_ba[[ctx_row, j]].to_bits());
            }
        }
    }

    #[test]
    fn zero_b_adapters_match_fully_zero_adapters() {
        // With B = 0 the adapter contributes exactly zero, so zeroing A as
        // well (a pure frozen forward) must give bit-identical outputs.
        let params = tiny_params(7);
        let mut frozen = params.clone();
        for l in &mut frozen.layers {
            l.lora_q.a.fill(0.0);
            l.lora_v.a.fill(0.0);
        }
        let stream = TokenStream::from_tokens(&[3, 1, 4, 1, 5]);
        let h1 = forward(&params, &stream, ForwardOpts::inference()).unwrap().hidden;
        let h2 = forward(&frozen, &stream, ForwardOpts::inference()).unwrap().hidden;
        for (a, b) in h1.iter().zip(h2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn candidate_position_index_is_irrelevant() {
        // A candidate keeps its hidden state when moved to another slot
        // index, because it has no positional embedding and only sees the
        // context plus itself.
        let params = tiny_params(8);
        let d = params.config.d_model;
        let base = TokenStream::from_tokens(&[2, 7, 1]);
        let vx = Array1::from_shape_fn(d, |i| (i as f64 * 0.37).sin());
        let vy = Array1::from_shape_fn(d, |i| (i as f64 * 0.11).cos());

        let first = base.with_candidates(&[vx.clone(), vy.clone()]);
        let second = base.with_candidates(&[vy, vx]);
        let h_first = forward(&params, &first, ForwardOpts::inference()).unwrap().hidden;
        let h_second = forward(&params, &second, ForwardOpts::inference()).unwrap().hidden;
        // vx sits at slot 3 in `first`, slot 4 in `second`.
        for j in 0..d {
            assert_eq!(h_first[[3, j]].to_bits(), h_second[[4, j]].to_bits());
        }
    }

    #[test]
    fn too_long_stream_is_rejected() {
        let params = tiny_params(9);
        let ids = vec![1u32; params.config.max_positions + 1];
        assert!(matches!(
            forward(&params, &TokenStream::from_tokens(&ids), ForwardOpts::inference()),
            Err(ModelError::StreamTooLong { .. })
        ));
    }

    #[test]
    fn logit_range_matches_full_logits() {
        let params = tiny_params(10);
        let stream = TokenStream::from_tokens(&[1, 2, 3, 4]);
        let full = forward(
            &params,
            &stream,
            ForwardOpts { dropout_rng: None, record: false, logit_rows: LogitRows::All },
        )
        .unwrap();
        let part = forward(
            &params,
            &stream,
            ForwardOpts { dropout_rng: None, record: false, logit_rows: LogitRows::Range(1, 3) },
        )
        .unwrap();
        let (_, full_l) = full.logits.unwrap();
        let (start, part_l) = part.logits.unwrap();
        assert_eq!(start, 1);
        for i in 0..2 {
            for v in 0..params.config.vocab_size {
                assert_eq!(full_l[[i + 1, v]].to_bits(), part_l[[i, v]].to_bits());
            }
        }
    }
}
