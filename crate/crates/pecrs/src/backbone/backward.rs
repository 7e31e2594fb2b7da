//! Backward pass: gradients of a scalar loss with respect to the trainable
//! backbone tensors (LoRA pairs, special-token embeddings) and the injected
//! vector slots. Frozen tensors never accumulate gradients; upstream
//! gradients still propagate through them.

use ndarray::{Array1, Array2};

use super::forward::ForwardCache;
use super::math;
use super::{BackboneGrads, BackboneParams, Slot, TokenStream, LoraGrads};

/// Gradient that arrived at an injected vector slot.
#[derive(Debug, Clone)]
pub struct InjectedGrad {
    pub slot: usize,
    pub grad: Array1<f64>,
}

/// dx for the adapted projection plus gradient accumulation into the LoRA
/// pair. `a_in` is the projection input, `xa` the cached a-projection.
fn lora_backward(
    dy: &Array2<f64>,
    a_in: &Array2<f64>,
    xa: &Array2<f64>,
    pair_a: &Array2<f64>,
    pair_b: &Array2<f64>,
    grads: &mut LoraGrads,
    scale: f64,
) -> Array2<f64> {
    let (t, _d_out) = dy.dim();
    let rank = pair_a.nrows();

    // d_xa = scale * dy @ B  (B is d_out x rank; columns walked per r).
    let mut d_xa = Array2::zeros((t, rank));
    for i in 0..t {
        let dyr = dy.row(i);
        let dyr = dyr.as_slice().unwrap();
        for r in 0..rank {
            let mut acc = 0.0;
            for (o, &dv) in dyr.iter().enumerate() {
                acc += dv * pair_b[[o, r]];
            }
            d_xa[[i, r]] = scale * acc;
        }
    }

    math::add_xt_y(&mut grads.b, dy, xa, scale); // dB += scale * dy^T @ xa
    math::add_xt_y(&mut grads.a, &d_xa, a_in, 1.0); // dA += d_xa^T @ a_in

    math::matmul(&d_xa, pair_a, None) // da += d_xa @ A
}

/// Backpropagates `d_hidden` (gradient at the final hidden states) and the
/// optional `d_logits` (starting row, gradient at the requested logit rows)
/// through a recorded forward pass.
pub fn backward(
    params: &BackboneParams,
    stream: &TokenStream,
    cache: &ForwardCache,
    d_hidden: &Array2<f64>,
    d_logits: Option<(usize, &Array2<f64>)>,
) -> (BackboneGrads, Vec<InjectedGrad>) {
    let cfg = &params.config;
    let t = stream.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = 1.0 / (dh as f64).sqrt();
    let lora_scale = cfg.lora_scale();

    let mut grads = BackboneGrads::zeros(cfg);

    // Gradient at the final layer-norm output.
    let mut dh_final = d_hidden.clone();
    if let Some((start, dl)) = d_logits {
        let drows = math::matmul_wt(dl, &params.w_out);
        for (r, drow) in drows.outer_iter().enumerate() {
            let mut target = dh_final.row_mut(start + r);
            target += &drow;
        }
    }

    let mut dx = math::layer_norm_backward(&dh_final, &params.final_norm.gamma, &cache.final_ln);

    for layer_idx in (0..params.layers.len()).rev() {
        let layer = &params.layers[layer_idx];
        let lcache = &cache.layers[layer_idx];

        // FFN block: x_out = x_mid + drop(W2 gelu(W1 ln2(x_mid))).
        let dffn_out = match &lcache.ffn_drop {
            Some(m) => &dx * m,
            None => dx.clone(),
        };
        let da1 = math::matmul_wt(&dffn_out, &layer.w_ff2);
        let mut dh1 = da1;
        dh1.zip_mut_with(&lcache.h1, |g, &h| *g *= math::gelu_grad(h));
        let d_bln = math::matmul_wt(&dh1, &layer.w_ff1);
        let dx_mid_extra = math::layer_norm_backward(&d_bln, &layer.norm2.gamma, &lcache.ln2);
        let dx_mid = &dx + &dx_mid_extra;

        // Attention block: x_mid = x_in + drop((attn) W_o).
        let d_o = match &lcache.attn_drop {
            Some(m) => &dx_mid * m,
            None => dx_mid.clone(),
        };
        let d_concat = math::matmul_wt(&d_o, &layer.w_o);

        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        {
            let qs = lcache.q.as_slice().unwrap();
            let ks = lcache.k.as_slice().unwrap();
            let vs = lcache.v.as_slice().unwrap();
            let dcs = d_concat.as_slice().unwrap();
            let dqs = dq.as_slice_mut().unwrap();
            let dks = dk.as_slice_mut().unwrap();
            let dvs = dv.as_slice_mut().unwrap();
            let mut dw: Vec<f64> = Vec::new();
            for i in 0..t {
                let row = stream.mask.row(i);
                let probs_i = &lcache.probs[i];
                for h in 0..n_heads {
                    let off = h * dh;
                    let d_ctx = &dcs[i * d + off..i * d + off + dh];
                    dw.clear();
                    let mut sum_w_dw = 0.0;
                    for (kk, j) in row.keys().enumerate() {
                        let v_h = &vs[j * d + off..j * d + off + dh];
                        let dw_j = math::dot(d_ctx, v_h);
                        sum_w_dw += probs_i[[h, kk]] * dw_j;
                        dw.push(dw_j);
                    }
                    let q_h: Vec<f64> = qs[i * d + off..i * d + off + dh].to_vec();
                    for (kk, j) in row.keys().enumerate() {
                        let w = probs_i[[h, kk]];
                        let ds = w * (dw[kk] - sum_w_dw);
                        let k_h = &ks[j * d + off..j * d + off + dh];
                        let dq_h = &mut dqs[i * d + off..i * d + off + dh];
                        for (dst, &kv) in dq_h.iter_mut().zip(k_h) {
                            *dst += ds * kv * attn_scale;
                        }
                        let dk_h = &mut dks[j * d + off..j * d + off + dh];
                        for (dst, &qv) in dk_h.iter_mut().zip(&q_h) {
                            *dst += ds * qv * attn_scale;
                        }
                        let dv_h = &mut dvs[j * d + off..j * d + off + dh];
                        for (dst, &dc) in dv_h.iter_mut().zip(d_ctx) {
                            *dst += w * dc;
                        }
                    }
                }
            }
        }

        // Back through the projections (frozen weights: propagate only) and
        // the adapters (accumulate + propagate).
        let mut da = math::matmul_wt(&dq, &layer.w_q);
        da += &math::matmul_wt(&dk, &layer.w_k);
        da += &math::matmul_wt(&dv, &layer.w_v);
        da += &lora_backward(
            &dq,
            &lcache.a,
            &lcache.xa_q,
            &layer.lora_q.a,
            &layer.lora_q.b,
            &mut grads.layers[layer_idx].lora_q,
            lora_scale,
        );
        da += &lora_backward(
            &dv,
            &lcache.a,
            &lcache.xa_v,
            &layer.lora_v.a,
            &layer.lora_v.b,
            &mut grads.layers[layer_idx].lora_v,
            lora_scale,
        );

        let dx_in_extra = math::layer_norm_backward(&da, &layer.norm1.gamma, &lcache.ln1);
        dx = &dx_mid + &dx_in_extra;
    }

    // Embedding stage.
    if let Some(m) = &cache.emb_drop {
        dx *= m;
    }
    let mut injected = Vec::new();
    for (i, slot) in stream.slots.iter().enumerate() {
        match slot {
            Slot::Token(id) => {
                if let Some(row) = cfg.trainable_special_row(*id) {
                    let mut target = grads.special_embedding.row_mut(row);
                    target += &dx.row(i);
                }
            }
            Slot::Vector(_) => {
                injected.push(InjectedGrad { slot: i, grad: dx.row(i).to_owned() });
            }
        }
    }

    (grads, injected)
}
