//! Subcommand definitions and their run functions.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    load_dialogues, load_item_bank, synthetic::generate_synthetic_corpus, write_dialogues,
    write_item_bank, ItemBank, MetadataField, Utterance,
};
use crate::eval::{evaluate, render_text_table, EvalConfig};
use crate::generator::{DecodingConfig, Strategy};
use crate::recommender::{
    assemble_context, encode_item_bank, load_embedding_cache, recommend, save_embedding_cache,
    ItemBankVectors, ItemVectors, Model,
};
use crate::trainer::{train, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pecrs",
    version,
    about = "Conversational recommender: one decoder-only model retrieves, re-ranks, and replies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Beam,
    DiverseBeam,
    TopK,
    Nucleus,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Beam => Strategy::Beam,
            StrategyArg::DiverseBeam => Strategy::DiverseBeam,
            StrategyArg::TopK => Strategy::TopK,
            StrategyArg::Nucleus => Strategy::Nucleus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreKindArg {
    NegAngular,
    Cosine,
}

#[derive(Args, Debug, Clone)]
pub struct DecodingArgs {
    /// Decoding strategy
    #[arg(long, value_enum, default_value = "top-k")]
    pub decoding: StrategyArg,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 2)]
    pub n_groups: usize,
    #[arg(long, default_value_t = 1.0)]
    pub diversity: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
}

impl DecodingArgs {
    pub fn to_config(&self, seed: u64) -> DecodingConfig {
        DecodingConfig {
            strategy: self.decoding.into(),
            beam_width: self.beam_width,
            n_groups: self.n_groups,
            diversity_penalty: self.diversity,
            k: self.k,
            p: self.p,
            max_new_tokens: self.max_new_tokens,
            seed,
            length_normalize: true,
        }
    }
}

/// Optional overrides for every TrainConfig field; unset flags fall back to
/// the config file, which falls back to defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m_train: Option<usize>,
    #[arg(long)]
    pub m_inference: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub context_cap: Option<usize>,
    #[arg(long)]
    pub response_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub score_kind: Option<ScoreKindArg>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub rerank_chunk: Option<usize>,
    #[arg(long)]
    pub no_recall: Option<bool>,
    #[arg(long)]
    pub no_rerank: Option<bool>,
    #[arg(long)]
    pub no_gen: Option<bool>,
    #[arg(long)]
    pub no_batch_sharing: Option<bool>,
    #[arg(long)]
    pub no_task_sharing: Option<bool>,
    #[arg(long)]
    pub no_item_pooling: Option<bool>,
    #[arg(long)]
    pub no_item_head: Option<bool>,
    #[arg(long)]
    pub title_only: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            alpha, beta, gamma, m_train, m_inference, lr_max, warmup, lr_decay, epochs,
            batch_size, grad_accum, context_cap, response_cap, seed, weight_decay, adam_beta1,
            adam_beta2, adam_eps, n_layers, n_heads, d_model, d_ff, max_positions, lora_rank,
            lora_alpha, dropout, vocab_size, rerank_chunk
        );
        if let Some(v) = self.score_kind {
            cfg.score_kind = match v {
                ScoreKindArg::NegAngular => crate::recommender::ScoreKind::NegAngular,
                ScoreKindArg::Cosine => crate::recommender::ScoreKind::Cosine,
            };
        }
        macro_rules! set_ablation {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.ablations.$field = v; })*
            };
        }
        set_ablation!(
            no_recall, no_rerank, no_gen, no_batch_sharing, no_task_sharing, no_item_pooling,
            no_item_head, title_only
        );
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic item bank and dialogue corpus
    Synth {
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 1000)]
        dialogues: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory (items.jsonl + dialogues.jsonl)
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on a corpus directory and write report.json
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output path for report.json (default: <data>/report.json)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        m_inference: Option<usize>,
        /// Metadata fields to prune at inference (title, actors, directors,
        /// genres, plot); repeatable
        #[arg(long)]
        prune: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        item_cache: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Rank items for one dialogue context given as a JSON file
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        items: PathBuf,
        /// JSON file: {"turns": [{"speaker", "text", "items"}, ...]}
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        m_inference: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        item_cache: Option<PathBuf>,
    },
    /// Generate responses for a corpus directory as JSONL
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output path (default: <data>/responses.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        m_inference: Option<usize>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Interactive seeker/recommender chat
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Precompute and cache item-bank embeddings for a checkpoint
    EncodeItems {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { items, dialogues, seed, out } => cmd_synth(items, dialogues, seed, &out),
        Command::Train { config, data, out, overrides } => cmd_train(config, &data, &out, &overrides),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            m_inference,
            prune,
            seed,
            item_cache,
            decoding,
        } => cmd_evaluate(&checkpoint, &data, out, m_inference, &prune, seed, item_cache, &decoding),
        Command::Recommend { checkpoint, items, context, m_inference, out, item_cache } => {
            cmd_recommend(&checkpoint, &items, &context, m_inference, out, item_cache)
        }
        Command::Generate { checkpoint, data, out, seed, m_inference, decoding } => {
            cmd_generate(&checkpoint, &data, out, seed, m_inference, &decoding)
        }
        Command::Chat { checkpoint, items, seed, decoding } => {
            chat_entry(&checkpoint, &items, seed, &decoding)
        }
        Command::EncodeItems { checkpoint, items, out } => cmd_encode_items(&checkpoint, &items, &out),
    }
}

fn cmd_synth(items: usize, dialogues: usize, seed: u64, out: &Path) -> Result<()> {
    let (bank, dials) = generate_synthetic_corpus(items, dialogues, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_item_bank(&out.join("items.jsonl"), &bank)?;
    write_dialogues(&out.join("dialogues.jsonl"), &dials)?;
    println!(
        "wrote {} items and {} dialogues to {}",
        items,
        dialogues,
        out.display()
    );
    Ok(())
}

fn load_corpus(data: &Path) -> Result<(ItemBank, Vec<crate::data::DialogueExample>)> {
    let bank = load_item_bank(&data.join("items.jsonl"))?;
    let examples = load_dialogues(&data.join("dialogues.jsonl"), &bank)?;
    Ok((bank, examples))
}

fn cmd_train(
    config: Option<PathBuf>,
    data: &Path,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    let (bank, examples) = load_corpus(data)?;
    let outcome = train(&bank, &examples, &cfg, out)?;
    println!(
        "best epoch {} with selection score {:.4} (R@1 {:.4}, R@10 {:.4}, R@50 {:.4})",
        outcome.meta.best_epoch,
        outcome.meta.selection_score,
        outcome.meta.r1,
        outcome.meta.r10,
        outcome.meta.r50
    );
    println!("checkpoint written to {}", outcome.checkpoint_dir.display());
    Ok(())
}

fn parse_prune(names: &[String]) -> Result<BTreeSet<MetadataField>> {
    let mut pruned = BTreeSet::new();
    for name in names {
        match MetadataField::parse(name) {
            Some(f) => {
                pruned.insert(f);
            }
            None => bail!(crate::error::DataError::Invalid(format!(
                "unknown metadata field '{name}'"
            ))),
        }
    }
    Ok(pruned)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    out: Option<PathBuf>,
    m_inference: Option<usize>,
    prune: &[String],
    seed: u64,
    _item_cache: Option<PathBuf>,
    decoding: &DecodingArgs,
) -> Result<()> {
    let (model, tokenizer, settings) = Model::load(checkpoint)?;
    let (bank, examples) = load_corpus(data)?;
    let mut pruned = settings.pruned_fields.clone();
    pruned.extend(parse_prune(prune)?);
    let cfg = EvalConfig {
        m_inference: m_inference.or(settings.m_inference).unwrap_or(0),
        rerank_chunk: settings.rerank_chunk,
        context_cap: settings.context_cap,
        response_cap: settings.response_cap,
        decoding: decoding.to_config(seed),
        pruned_fields: pruned,
        seed,
    };
    let (report, _records) = evaluate(&model, &tokenizer, &bank, &examples, &cfg)?;
    let out_path = out.unwrap_or_else(|| data.join("report.json"));
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&out_path, &json).with_context(|| format!("writing {}", out_path.display()))?;
    print!("{}", render_text_table(&report));
    println!("report written to {}", out_path.display());
    Ok(())
}

fn load_bank_vectors(
    model: &Model,
    tokenizer: &crate::data::Tokenizer,
    bank: &ItemBank,
    pruned: &BTreeSet<MetadataField>,
    checkpoint: &Path,
    item_cache: Option<PathBuf>,
) -> Result<ItemBankVectors> {
    if let Some(cache) = item_cache {
        let hash = crate::backbone::checkpoint::tensors_sha256(checkpoint)?;
        return Ok(load_embedding_cache(&cache, &hash)?);
    }
    Ok(encode_item_bank(model, tokenizer, bank, pruned)?)
}

fn cmd_recommend(
    checkpoint: &Path,
    items: &Path,
    context_path: &Path,
    m_inference: Option<usize>,
    out: Option<PathBuf>,
    item_cache: Option<PathBuf>,
) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct ContextFile {
        turns: Vec<TurnJson>,
    }
    #[derive(serde::Deserialize)]
    struct TurnJson {
        speaker: String,
        text: String,
        #[serde(default)]
        items: Vec<u32>,
    }

    let (model, tokenizer, settings) = Model::load(checkpoint)?;
    let bank = load_item_bank(items)?;
    let text = std::fs::read_to_string(context_path)
        .with_context(|| format!("reading {}", context_path.display()))?;
    let parsed: ContextFile = serde_json::from_str(&text).map_err(|e| {
        crate::error::DataError::MalformedLine {
            path: context_path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        }
    })?;
    let mut turns = Vec::new();
    for t in parsed.turns {
        let speaker = match t.speaker.as_str() {
            "seeker" => crate::data::Speaker::Seeker,
            "recommender" => crate::data::Speaker::Recommender,
            other => bail!(crate::error::DataError::UnknownSpeaker {
                path: context_path.display().to_string(),
                line: 0,
                label: other.to_string(),
            }),
        };
        for &id in &t.items {
            if !bank.contains(id) {
                bail!(crate::error::DataError::UnresolvedItem {
                    path: context_path.display().to_string(),
                    line: 0,
                    id,
                });
            }
        }
        turns.push(Utterance { speaker, text: t.text, item_ids: t.items });
    }

    let vectors = load_bank_vectors(
        &model,
        &tokenizer,
        &bank,
        &settings.pruned_fields,
        checkpoint,
        item_cache,
    )?;
    let mut item_vectors = ItemVectors::new();
    for turn in &turns {
        for &id in &turn.item_ids {
            if let Some(v) = vectors.vector_for(id) {
                item_vectors.insert(id, v.clone());
            }
        }
    }
    let stream = assemble_context(&turns, &item_vectors, &tokenizer, settings.context_cap)?;
    let m = m_inference.or(settings.m_inference).unwrap_or(0);
    let m = if m == 0 { bank.len() } else { m };
    let result = recommend(&model, &vectors, &stream, m, settings.rerank_chunk)?;

    let titles: Vec<String> = result
        .ranking
        .iter()
        .take(10)
        .map(|id| bank.get(*id).map(|i| i.title.clone()).unwrap_or_default())
        .collect();
    let json = serde_json::json!({
        "ranking": result.ranking,
        "rerank_scores": result.rerank_scores,
        "candidates": result.candidates,
        "top_titles": titles,
    });
    let rendered = serde_json::to_string_pretty(&json)?;
    match out {
        Some(path) => {
            std::fs::write(&path, &rendered)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("ranking written to {}", path.display());
        }
        None => println!("{rendered}"),
    }
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    data: &Path,
    out: Option<PathBuf>,
    seed: u64,
    m_inference: Option<usize>,
    decoding: &DecodingArgs,
) -> Result<()> {
    let (model, tokenizer, settings) = Model::load(checkpoint)?;
    let (bank, examples) = load_corpus(data)?;
    let cfg = EvalConfig {
        m_inference: m_inference.or(settings.m_inference).unwrap_or(0),
        rerank_chunk: settings.rerank_chunk,
        context_cap: settings.context_cap,
        response_cap: settings.response_cap,
        decoding: decoding.to_config(seed),
        pruned_fields: settings.pruned_fields.clone(),
        seed,
    };
    let (_report, records) = evaluate(&model, &tokenizer, &bank, &examples, &cfg)?;
    let out_path = out.unwrap_or_else(|| data.join("responses.jsonl"));
    let mut file = std::fs::File::create(&out_path)
        .with_context(|| format!("creating {}", out_path.display()))?;
    for record in &records {
        writeln!(file, "{}", serde_json::to_string(record)?)?;
    }
    println!("{} responses written to {}", records.len(), out_path.display());
    Ok(())
}

fn chat_entry(checkpoint: &Path, items: &Path, seed: u64, decoding: &DecodingArgs) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    super::chat::run_chat(checkpoint, items, seed, decoding, stdin.lock(), stdout.lock())
}

fn cmd_encode_items(checkpoint: &Path, items: &Path, out: &Path) -> Result<()> {
    let (model, tokenizer, settings) = Model::load(checkpoint)?;
    let bank = load_item_bank(items)?;
    let vectors = encode_item_bank(&model, &tokenizer, &bank, &settings.pruned_fields)?;
    let hash = crate::backbone::checkpoint::tensors_sha256(checkpoint)?;
    save_embedding_cache(out, &vectors, &hash)?;
    println!("encoded {} items to {}", vectors.len(), out.display());
    Ok(())
}
