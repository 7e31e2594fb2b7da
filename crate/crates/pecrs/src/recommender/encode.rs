//! Item encoding: backbone forward with gradients stopped, attention-style
//! pooling over the token outputs, and the item head.

use ndarray::{Array1, Array2};

use super::{EncoderGrads, ItemEncoderParams, ModelOptions};
use crate::backbone::{forward, BackboneParams, ForwardOpts, TokenStream};
use crate::error::ModelError;

/// Cached item-encoding state; `hidden` is a constant (the backbone is a
/// stop-gradient path here), so the backward pass only reaches the pooling
/// vector and the item head.
#[derive(Debug, Clone)]
pub struct ItemForward {
    pub hidden: Array2<f64>,
    pub pool_weights: Array1<f64>,
    pub pooled: Array1<f64>,
    pub vector: Array1<f64>,
}

/// Backbone pass over an item's tokens; gradients never flow through this
/// path, so it always runs in inference mode.
pub fn item_hidden(
    backbone: &BackboneParams,
    item_tokens: &[u32],
) -> Result<Array2<f64>, ModelError> {
    if item_tokens.is_empty() {
        return Err(ModelError::EmptyInput("encode_item"));
    }
    let stream = TokenStream::from_tokens(item_tokens);
    Ok(forward(backbone, &stream, ForwardOpts::inference())?.hidden)
}

/// Pooling and item head over precomputed (constant) hidden states.
pub fn pool_and_head(
    encoder: &ItemEncoderParams,
    options: &ModelOptions,
    hidden: Array2<f64>,
) -> ItemForward {
    let t = hidden.nrows();
    let d = hidden.ncols();

    let mut weights = Array1::zeros(t);
    if options.learned_pooling {
        let mut smax = f64::NEG_INFINITY;
        for i in 0..t {
            let s = hidden.row(i).dot(&encoder.pooling);
            weights[i] = s;
            if s > smax {
                smax = s;
            }
        }
        let mut z = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - smax).exp();
            z += *w;
        }
        weights.mapv_inplace(|w| w / z);
    } else {
        weights.fill(1.0 / t as f64);
    }

    let mut pooled = Array1::zeros(d);
    for i in 0..t {
        pooled.scaled_add(weights[i], &hidden.row(i));
    }

    let vector = if options.use_item_head { pooled.dot(&encoder.h_w) + &encoder.h_b } else { pooled.clone() };
    ItemForward { hidden, pool_weights: weights, pooled, vector }
}

/// Encodes one item's token sequence into its d_model vector.
pub fn encode_item(
    backbone: &BackboneParams,
    encoder: &ItemEncoderParams,
    options: &ModelOptions,
    item_tokens: &[u32],
) -> Result<ItemForward, ModelError> {
    Ok(pool_and_head(encoder, options, item_hidden(backbone, item_tokens)?))
}

/// Backpropagates d(loss)/d(vector) into the pooling vector and item head.
pub fn encode_item_backward(
    encoder: &ItemEncoderParams,
    options: &ModelOptions,
    cache: &ItemForward,
    d_vector: &Array1<f64>,
    grads: &mut EncoderGrads,
) {
    let d = d_vector.len();
    let d_pooled = if options.use_item_head {
        for m in 0..d {
            let pm = cache.pooled[m];
            let mut row = grads.h_w.row_mut(m);
            for k in 0..d {
                row[k] += pm * d_vector[k];
            }
        }
        grads.h_b += d_vector;
        encoder.h_w.dot(d_vector)
    } else {
        d_vector.clone()
    };

    if options.learned_pooling {
        let t = cache.hidden.nrows();
        // d_weights then softmax backward onto the pooling scores.
        let mut dw = Array1::zeros(t);
        let mut sum_w_dw = 0.0;
        for i in 0..t {
            let dwi = cache.hidden.row(i).dot(&d_pooled);
            dw[i] = dwi;
            sum_w_dw += cache.pool_weights[i] * dwi;
        }
        for i in 0..t {
            let ds = cache.pool_weights[i] * (dw[i] - sum_w_dw);
            grads.pooling.scaled_add(ds, &cache.hidden.row(i));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (BackboneParams, ItemEncoderParams, ModelOptions) {
        let backbone = BackboneParams::init(BackboneConfig::tiny(24), 31).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let encoder = ItemEncoderParams::init(backbone.config.d_model, &mut rng);
        (backbone, encoder, ModelOptions::default())
    }

    #[test]
    fn single_token_item_pools_to_its_hidden_state() {
        let (backbone, encoder, options) = setup();
        let out = encode_item(&backbone, &encoder, &options, &[5]).unwrap();
        assert_eq!(out.pool_weights.len(), 1);
        assert!((out.pool_weights[0] - 1.0).abs() < 1e-15);
        for (p, h) in out.pooled.iter().zip(out.hidden.row(0).iter()) {
            assert_eq!(p.to_bits(), h.to_bits());
        }
        let expect = out.pooled.dot(&encoder.h_w) + &encoder.h_b;
        assert_eq!(out.vector, expect);
    }

    #[test]
    fn equal_scores_pool_to_the_mean() {
        let (backbone, mut encoder, options) = setup();
        encoder.pooling.fill(0.0); // all scores equal -> uniform softmax
        let out = encode_item(&backbone, &encoder, &options, &[3, 9]).unwrap();
        for i in 0..2 {
            assert!((out.pool_weights[i] - 0.5).abs() < 1e-15);
        }
        let mean = (&out.hidden.row(0) + &out.hidden.row(1)) / 2.0;
        for (p, m) in out.pooled.iter().zip(mean.iter()) {
            assert!((p - m).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_item_is_rejected() {
        let (backbone, encoder, options) = setup();
        assert!(matches!(
            encode_item(&backbone, &encoder, &options, &[]),
            Err(ModelError::EmptyInput(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (backbone, encoder, options) = setup();
        let d = backbone.config.d_model;
        let tokens = [2u32, 7, 11];
        // probe: weighted sum of vector entries
        let probe = |enc: &ItemEncoderParams| {
            let out = encode_item(&backbone, enc, &options, &tokens).unwrap();
            out.vector.iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0)).sum::<f64>()
        };
        let cache = encode_item(&backbone, &encoder, &options, &tokens).unwrap();
        let d_vec = Array1::from_shape_fn(d, |i| ((i % 5) as f64 - 2.0));
        let mut grads = EncoderGrads::zeros(d);
        encode_item_backward(&encoder, &options, &cache, &d_vec, &mut grads);

        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for (get, set, analytic) in [
            (
                encoder.pooling[2],
                Box::new(|e: &mut ItemEncoderParams, v: f64| e.pooling[2] = v)
                    as Box<dyn Fn(&mut ItemEncoderParams, f64)>,
                grads.pooling[2],
            ),
            (
                encoder.h_w[[1, 3]],
                Box::new(|e: &mut ItemEncoderParams, v: f64| e.h_w[[1, 3]] = v),
                grads.h_w[[1, 3]],
            ),
            (
                encoder.h_b[0],
                Box::new(|e: &mut ItemEncoderParams, v: f64| e.h_b[0] = v),
                grads.h_b[0],
            ),
        ] {
            let mut e = encoder.clone();
            set(&mut e, get + eps);
            let up = probe(&e);
            set(&mut e, get - eps);
            let down = probe(&e);
            let fd = (up - down) / (2.0 * eps);
            assert!(rel(fd, analytic) < 1e-5, "fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn ablated_encoder_modes() {
        let (backbone, encoder, _) = setup();
        let no_pool = ModelOptions { learned_pooling: false, ..Default::default() };
        let out = encode_item(&backbone, &encoder, &no_pool, &[3, 9, 4]).unwrap();
        for w in out.pool_weights.iter() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let no_head = ModelOptions { use_item_head: false, ..Default::default() };
        let out = encode_item(&backbone, &encoder, &no_head, &[3]).unwrap();
        assert_eq!(out.vector, out.pooled);
    }
}
