//! One training step: shared negative sampling, item encoding on the
//! stop-gradient path, the combined retrieval/re-rank pass, the generation
//! pass, and gradient assembly for the weighted loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use super::TrainConfig;
use crate::backbone::{backward, forward, ForwardOpts, LogitRows};
use crate::data::{format_item_metadata, DialogueExample, ItemBank, MetadataField, Tokenizer};
use crate::error::ModelError;
use crate::generator::{generation_input, generation_loss_forward};
use crate::recommender::{
    assemble_base_with_items, encode_item_backward, f_backward, f_forward, g_backward, g_forward,
    item_hidden, pool_and_head, recall_loss_grads, rerank_loss_grads, sample_negatives,
    score_backward, score_value, ItemForward, ItemVectors, Model, ModelGrads,
};

/// Unique item ids touched by this batch, ascending: context mentions,
/// targets, and whichever negative lists the active losses need.
fn step_items_sorted(batch: &[DialogueExample], plan: &NegativePlan, aw: f64, bw: f64) -> Vec<u32> {
    let mut ids = BTreeSet::new();
    for (e, ex) in batch.iter().enumerate() {
        for utt in &ex.context {
            ids.extend(utt.item_ids.iter().copied());
        }
        if let Some(p) = ex.target_item {
            ids.insert(p);
        }
        if ex.target_item.is_some() {
            if aw > 0.0 {
                ids.extend(plan.recall[e].iter().copied());
            }
            if bw > 0.0 {
                ids.extend(plan.rerank[e].iter().copied());
            }
        }
    }
    ids.into_iter().collect()
}

/// Per-element negative id lists for the two recommendation losses. Under
/// default sharing every element holds the same list for both tasks.
#[derive(Debug, Clone)]
pub struct NegativePlan {
    pub recall: Vec<Vec<u32>>,
    pub rerank: Vec<Vec<u32>>,
}

impl NegativePlan {
    /// Samples according to the sharing ablation flags.
    pub fn build(
        bank: &ItemBank,
        batch: &[DialogueExample],
        cfg: &TrainConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<NegativePlan, ModelError> {
        let m = cfg.m_train;
        let all_positives: BTreeSet<u32> = batch.iter().filter_map(|e| e.target_item).collect();
        let n = batch.len();
        let flags = cfg.ablations;

        let sample_for = |positives: &BTreeSet<u32>,
                              rng: &mut ChaCha20Rng|
         -> Result<Vec<u32>, ModelError> { sample_negatives(bank, positives, m, rng) };

        if !flags.no_batch_sharing {
            let recall_shared = sample_for(&all_positives, rng)?;
            let rerank_shared = if flags.no_task_sharing {
                sample_for(&all_positives, rng)?
            } else {
                recall_shared.clone()
            };
            Ok(NegativePlan {
                recall: vec![recall_shared; n],
                rerank: vec![rerank_shared; n],
            })
        } else {
            let mut recall = Vec::with_capacity(n);
            let mut rerank = Vec::with_capacity(n);
            for ex in batch {
                match ex.target_item {
                    Some(p) => {
                        let own: BTreeSet<u32> = [p].into();
                        let a = sample_for(&own, rng)?;
                        let b = if flags.no_task_sharing { sample_for(&own, rng)? } else { a.clone() };
                        recall.push(a);
                        rerank.push(b);
                    }
                    None => {
                        recall.push(Vec::new());
                        rerank.push(Vec::new());
                    }
                }
            }
            Ok(NegativePlan { recall, rerank })
        }
    }
}

/// Candidate-order permutations, one per batch element, for the joint
/// shuffle of re-rank scores and labels.
pub fn build_shuffles(batch_len: usize, m: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    (0..batch_len)
        .map(|_| {
            let mut perm: Vec<usize> = (0..m + 1).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            perm
        })
        .collect()
}

/// Unweighted per-batch loss sums (divide by the effective batch size for
/// the logged means).
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub recall: f64,
    pub rerank: f64,
    pub gen: f64,
}

impl StepLosses {
    pub fn add(&mut self, other: StepLosses) {
        self.recall += other.recall;
        self.rerank += other.rerank;
        self.gen += other.gen;
    }

    pub fn is_finite(&self) -> bool {
        self.recall.is_finite() && self.rerank.is_finite() && self.gen.is_finite()
    }
}

pub type StepGrads = ModelGrads;

struct ElementOut {
    losses: StepLosses,
    grads: Option<ModelGrads>,
    dv: Vec<(u32, Array1<f64>)>,
}

/// Computes the batch's losses and (optionally) the gradients of the
/// weighted combination, already scaled by 1/denom. `denom` is the
/// effective batch size, which may exceed `batch.len()` under gradient
/// accumulation.
#[allow(clippy::too_many_arguments)]
pub fn compute_step(
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &ItemBank,
    pruned: &BTreeSet<MetadataField>,
    batch: &[DialogueExample],
    plan: &NegativePlan,
    shuffles: &[Vec<usize>],
    cfg: &TrainConfig,
    denom: usize,
    dropout_seeds: Option<&[u64]>,
    want_grads: bool,
) -> Result<(StepLosses, Option<StepGrads>), ModelError> {
    let (aw, bw, gw) = cfg.effective_weights();
    let backbone_cfg = &model.backbone.config;

    // Encode every item this step touches, once, on the stop-gradient path.
    let item_ids = step_items_sorted(batch, plan, aw, bw);
    let forwards: BTreeMap<u32, ItemForward> = {
        let encoded: Result<Vec<(u32, ItemForward)>, ModelError> = item_ids
            .par_iter()
            .map(|&id| {
                let item = bank
                    .get(id)
                    .ok_or_else(|| ModelError::Invalid(format!("item {id} not in bank")))?;
                let text = format_item_metadata(item, pruned);
                let mut tokens = tokenizer.encode(&text);
                tokens.truncate(backbone_cfg.max_positions);
                let hidden = item_hidden(&model.backbone, &tokens)?;
                Ok((id, pool_and_head(&model.encoder, &model.options, hidden)))
            })
            .collect();
        encoded?.into_iter().collect()
    };

    let outs: Result<Vec<ElementOut>, ModelError> = batch
        .par_iter()
        .enumerate()
        .map(|(e, ex)| {
            let mut rng = dropout_seeds.map(|s| ChaCha20Rng::seed_from_u64(s[e]));
            element_pass(
                model, tokenizer, ex, plan, &shuffles[e], e, &forwards, cfg, denom, aw, bw, gw,
                rng.as_mut(), want_grads,
            )
        })
        .collect();
    let outs = outs?;

    let mut losses = StepLosses::default();
    let mut grads = if want_grads { Some(ModelGrads::zeros(backbone_cfg)) } else { None };
    let mut dv_total: BTreeMap<u32, Array1<f64>> = BTreeMap::new();
    for out in outs {
        losses.add(out.losses);
        if let (Some(total), Some(g)) = (grads.as_mut(), out.grads.as_ref()) {
            total.add_assign(g);
        }
        for (id, dv) in out.dv {
            dv_total
                .entry(id)
                .and_modify(|acc| *acc += &dv)
                .or_insert(dv);
        }
    }

    // Item-encoder backward, once per unique item.
    if let Some(total) = grads.as_mut() {
        for (id, dv) in &dv_total {
            encode_item_backward(&model.encoder, &model.options, &forwards[id], dv, &mut total.encoder);
        }
    }

    Ok((losses, grads))
}

#[allow(clippy::too_many_arguments)]
fn element_pass(
    model: &Model,
    tokenizer: &Tokenizer,
    ex: &DialogueExample,
    plan: &NegativePlan,
    shuffle: &[usize],
    e: usize,
    forwards: &BTreeMap<u32, ItemForward>,
    cfg: &TrainConfig,
    denom: usize,
    aw: f64,
    bw: f64,
    gw: f64,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
    want_grads: bool,
) -> Result<ElementOut, ModelError> {
    let special = tokenizer.special();
    let d = model.backbone.config.d_model;
    let mut losses = StepLosses::default();
    let mut grads =
        if want_grads { Some(ModelGrads::zeros(&model.backbone.config)) } else { None };
    let mut dv: HashMap<u32, Array1<f64>> = HashMap::new();
    let add_dv = |map: &mut HashMap<u32, Array1<f64>>, id: u32, g: Array1<f64>| {
        map.entry(id).and_modify(|acc| *acc += &g).or_insert(g);
    };

    let mut vectors = ItemVectors::new();
    for utt in &ex.context {
        for &id in &utt.item_ids {
            vectors.insert(id, forwards[&id].vector.clone());
        }
    }
    if let Some(p) = ex.target_item {
        vectors.insert(p, forwards[&p].vector.clone());
    }

    let (base, base_items) =
        assemble_base_with_items(&ex.context, &vectors, tokenizer, cfg.context_cap)?;
    let base_item_by_slot: HashMap<usize, u32> = base_items.iter().copied().collect();

    // ---- retrieval + re-ranking (one combined pass) ----
    let rec_active = ex.target_item.is_some() && (aw > 0.0 || bw > 0.0);
    if rec_active {
        let positive = ex.target_item.unwrap();
        let mut ret_stream = base.clone();
        ret_stream.push_token(special.rec);
        let ctx_len = ret_stream.len();

        let rerank_negs = &plan.rerank[e];
        let candidate_ids: Vec<u32> = {
            let ordered: Vec<u32> =
                std::iter::once(positive).chain(rerank_negs.iter().copied()).collect();
            shuffle.iter().map(|&i| ordered[i]).collect()
        };
        let pos_slot = shuffle.iter().position(|&i| i == 0).unwrap();

        let (stream, fwd) = if bw > 0.0 {
            let cand_vectors: Vec<Array1<f64>> =
                candidate_ids.iter().map(|id| forwards[id].vector.clone()).collect();
            let stream = ret_stream.with_candidates(&cand_vectors);
            let fwd = forward(
                &model.backbone,
                &stream,
                ForwardOpts {
                    dropout_rng: dropout_rng.as_deref_mut(),
                    record: want_grads,
                    logit_rows: LogitRows::None,
                },
            )?;
            (stream, fwd)
        } else {
            let fwd = forward(
                &model.backbone,
                &ret_stream,
                ForwardOpts {
                    dropout_rng: dropout_rng.as_deref_mut(),
                    record: false,
                    logit_rows: LogitRows::None,
                },
            )?;
            (ret_stream.clone(), fwd)
        };

        // The query representation is detached: the recall loss trains only
        // f, the pooling, and the item head.
        let d_t = fwd.hidden.row(ctx_len - 1).to_owned();

        if aw > 0.0 {
            let fc = f_forward(&model.heads, &d_t);
            let v_pos = &forwards[&positive].vector;
            let s_p = score_value(model.options.score_kind, &fc.out, v_pos);
            let recall_negs = &plan.recall[e];
            let s_negs: Vec<f64> = recall_negs
                .iter()
                .map(|id| score_value(model.options.score_kind, &fc.out, &forwards[id].vector))
                .collect();
            let (l_rec, d_pos, d_negs) = recall_loss_grads(s_p, &s_negs)?;
            losses.recall += l_rec;

            if let Some(g) = grads.as_mut() {
                let w = aw / denom as f64;
                let mut du_total = Array1::zeros(d);
                let (du, dvp) =
                    score_backward(model.options.score_kind, &fc.out, v_pos, w * d_pos);
                du_total += &du;
                add_dv(&mut dv, positive, dvp);
                for (j, id) in recall_negs.iter().enumerate() {
                    let (du, dvn) = score_backward(
                        model.options.score_kind,
                        &fc.out,
                        &forwards[id].vector,
                        w * d_negs[j],
                    );
                    du_total += &du;
                    add_dv(&mut dv, *id, dvn);
                }
                f_backward(&model.heads, &fc, &du_total, &mut g.heads);
            }
        }

        if bw > 0.0 {
            let n_cand = candidate_ids.len();
            let mut fcaches = Vec::with_capacity(n_cand);
            let mut scores = Vec::with_capacity(n_cand);
            for c in 0..n_cand {
                let h = fwd.hidden.row(ctx_len + c).to_owned();
                let fc = f_forward(&model.heads, &h);
                scores.push(g_forward(&model.heads, &fc.out));
                fcaches.push(fc);
            }
            let (l_rr, d_scores) = rerank_loss_grads(&scores, pos_slot);
            losses.rerank += l_rr;

            if let Some(g) = grads.as_mut() {
                let w = bw / denom as f64;
                let mut d_hidden = Array2::zeros((stream.len(), d));
                for c in 0..n_cand {
                    let dq = g_backward(&model.heads, &fcaches[c].out, w * d_scores[c], &mut g.heads);
                    let dh = f_backward(&model.heads, &fcaches[c], &dq, &mut g.heads);
                    let mut row = d_hidden.row_mut(ctx_len + c);
                    row += &dh;
                }
                let (bgrads, injected) =
                    backward(&model.backbone, &stream, fwd.cache.as_ref().unwrap(), &d_hidden, None);
                g.backbone.add_assign(&bgrads);
                for inj in injected {
                    if inj.slot >= ctx_len {
                        add_dv(&mut dv, candidate_ids[inj.slot - ctx_len], inj.grad);
                    } else if let Some(&id) = base_item_by_slot.get(&inj.slot) {
                        add_dv(&mut dv, id, inj.grad);
                    }
                }
            }
        }
    }

    // ---- generation ----
    if gw > 0.0 {
        let v_p = ex.target_item.map(|p| forwards[&p].vector.clone());
        let gen_input = generation_input(&base, v_p.as_ref(), special);
        let mut targets = tokenizer.encode(&ex.target.text);
        targets.truncate(cfg.response_cap.saturating_sub(1).max(1));
        targets.push(special.eot);

        let gen = generation_loss_forward(
            &model.backbone,
            &gen_input,
            &targets,
            special,
            dropout_rng.as_deref_mut(),
        )?;
        losses.gen += gen.loss;

        if let Some(g) = grads.as_mut() {
            let w = gw / denom as f64;
            let mut dl = gen.d_logits.clone();
            dl.mapv_inplace(|x| x * w);
            let zeros = Array2::zeros((gen.stream.len(), d));
            let (bgrads, injected) = backward(
                &model.backbone,
                &gen.stream,
                &gen.cache,
                &zeros,
                Some((gen.logit_start, &dl)),
            );
            g.backbone.add_assign(&bgrads);
            let item_slot = base.len() + 1; // [REC] vector [REC_END]
            for inj in injected {
                if ex.target_item.is_some() && inj.slot == item_slot {
                    add_dv(&mut dv, ex.target_item.unwrap(), inj.grad);
                } else if let Some(&id) = base_item_by_slot.get(&inj.slot) {
                    add_dv(&mut dv, id, inj.grad);
                }
            }
        }
    }

    let mut dv_sorted: Vec<(u32, Array1<f64>)> = dv.into_iter().collect();
    dv_sorted.sort_by_key(|(id, _)| *id);
    Ok(ElementOut { losses, grads, dv: dv_sorted })
}
