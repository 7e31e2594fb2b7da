//! Response generation: item-conditioned prompting, the next-token training
//! loss, decoding strategies, and the [ITEM]-token recommendation gate.

mod decode;

pub use decode::generate;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward, BackboneParams, ForwardCache, ForwardOpts, LogitRows, Slot, TokenStream,
};
use crate::data::tokenizer::SpecialIds;
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    DiverseBeam,
    TopK,
    Nucleus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub n_groups: usize,
    pub diversity_penalty: f64,
    pub k: usize,
    pub p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Length-normalize beam scores (average log-probability).
    pub length_normalize: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            strategy: Strategy::TopK,
            beam_width: 4,
            n_groups: 2,
            diversity_penalty: 1.0,
            k: 50,
            p: 0.9,
            max_new_tokens: 64,
            seed: 0,
            length_normalize: true,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self.strategy {
            Strategy::Beam | Strategy::DiverseBeam => {
                if self.beam_width == 0 {
                    return Err(ModelError::Invalid("beam_width must be >= 1".into()));
                }
                if self.strategy == Strategy::DiverseBeam
                    && (self.n_groups == 0 || self.beam_width % self.n_groups != 0)
                {
                    return Err(ModelError::Invalid(format!(
                        "beam_width {} must divide into n_groups {}",
                        self.beam_width, self.n_groups
                    )));
                }
            }
            Strategy::TopK => {
                if self.k == 0 {
                    return Err(ModelError::Invalid("top-k needs k >= 1".into()));
                }
            }
            Strategy::Nucleus => {
                if !(self.p > 0.0 && self.p <= 1.0) {
                    return Err(ModelError::Invalid(format!("nucleus p {} not in (0,1]", self.p)));
                }
            }
            Strategy::Greedy => {}
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::Invalid("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds the generation prompt: the assembled context (without the
/// retrieval [REC] query) plus, when an item is to be recommended, the
/// [REC] item-vector [REC_END] block.
pub fn generation_input(
    base: &TokenStream,
    item_vector: Option<&Array1<f64>>,
    special: SpecialIds,
) -> TokenStream {
    let mut stream = base.clone();
    if let Some(v) = item_vector {
        stream.push_token(special.rec);
        stream.slots.push(Slot::Vector(v.clone()));
        stream.use_position.push(true);
        stream.push_token(special.rec_end);
        // push_token rebuilt the causal mask to the final length
    }
    stream
}

/// Mean negative log-likelihood of `targets` under the given logit rows,
/// plus d(loss)/d(logits).
pub fn target_nll(logits: &Array2<f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    let n = targets.len();
    debug_assert_eq!(logits.nrows(), n);
    let v = logits.ncols();
    let mut loss = 0.0;
    let mut d = Array2::zeros((n, v));
    for (j, &tok) in targets.iter().enumerate() {
        let row = logits.row(j);
        let row = row.as_slice().unwrap();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - max).exp();
        }
        let logz = z.ln() + max;
        loss += logz - row[tok as usize];
        let scale = 1.0 / n as f64;
        for (c, &x) in row.iter().enumerate() {
            d[[j, c]] = ((x - logz).exp()) * scale;
        }
        d[[j, tok as usize]] -= scale;
    }
    (loss / n as f64, d)
}

/// Training-time forward for the generation loss, keeping everything the
/// backward pass needs.
pub struct GenLossForward {
    pub stream: TokenStream,
    pub loss: f64,
    pub d_logits: Array2<f64>,
    pub logit_start: usize,
    pub cache: ForwardCache,
}

pub fn generation_loss_forward(
    backbone: &BackboneParams,
    input: &TokenStream,
    targets: &[u32],
    special: SpecialIds,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<GenLossForward, ModelError> {
    if targets.is_empty() {
        return Err(ModelError::EmptyInput("generation_loss"));
    }
    let mut stream = input.clone();
    if stream.is_empty() {
        // a recommender opening turn with no item: start from end-of-text
        stream.push_token(special.eot);
    }
    let input_len = stream.len();
    for &t in targets {
        stream.push_token(t);
    }
    let logit_start = input_len - 1;
    let out = forward(
        backbone,
        &stream,
        ForwardOpts {
            dropout_rng,
            record: true,
            logit_rows: LogitRows::Range(logit_start, logit_start + targets.len()),
        },
    )?;
    let (_, logits) = out.logits.unwrap();
    let (loss, d_logits) = target_nll(&logits, targets);
    Ok(GenLossForward { stream, loss, d_logits, logit_start, cache: out.cache.unwrap() })
}

/// Mean next-token NLL over the target positions (context positions carry
/// no loss).
pub fn generation_loss(
    backbone: &BackboneParams,
    input: &TokenStream,
    targets: &[u32],
    special: SpecialIds,
) -> Result<f64, ModelError> {
    Ok(generation_loss_forward(backbone, input, targets, special, None)?.loss)
}

/// True iff the generated tokens contain the [ITEM] special id.
pub fn recommendation_gate(generated: &[u32], special: SpecialIds) -> bool {
    generated.contains(&special.item)
}
