//! Word-level tokenizer with a frequency-built vocabulary and the four
//! recommendation special tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const ITEM_TEXT: &str = "[ITEM]";
pub const SEP_TEXT: &str = "[SEP]";
pub const REC_TEXT: &str = "[REC]";
pub const REC_END_TEXT: &str = "[REC_END]";
pub const PAD_TEXT: &str = "<pad>";
pub const EOT_TEXT: &str = "<eot>";
pub const UNK_TEXT: &str = "<unk>";

/// Number of ids reserved outside the ordinary range: the four special
/// tokens plus pad and end-of-text.
pub const RESERVED: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub item: u32,
    pub sep: u32,
    pub rec: u32,
    pub rec_end: u32,
    pub pad: u32,
    pub eot: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Ordinary tokens (including `<unk>` at id 0), assigned by corpus
    /// frequency. Special ids live past the end of this range.
    vocab: BTreeMap<String, u32>,
    special: SpecialIds,
    #[serde(skip)]
    reverse: Vec<String>,
}

impl Tokenizer {
    /// Total vocabulary size including the reserved ids.
    pub fn total_size(&self) -> usize {
        self.vocab.len() + RESERVED
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|tok| self.encode_token(tok)).collect()
    }

    pub fn encode_token(&self, tok: &str) -> u32 {
        match tok {
            ITEM_TEXT => self.special.item,
            SEP_TEXT => self.special.sep,
            REC_TEXT => self.special.rec,
            REC_END_TEXT => self.special.rec_end,
            PAD_TEXT => self.special.pad,
            EOT_TEXT => self.special.eot,
            _ => self.vocab.get(tok).copied().unwrap_or(0),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, DataError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            out.push(self.decode_token(id)?);
        }
        Ok(out.join(" "))
    }

    pub fn decode_token(&self, id: u32) -> Result<&str, DataError> {
        let s = self.special;
        if id == s.item {
            Ok(ITEM_TEXT)
        } else if id == s.sep {
            Ok(SEP_TEXT)
        } else if id == s.rec {
            Ok(REC_TEXT)
        } else if id == s.rec_end {
            Ok(REC_END_TEXT)
        } else if id == s.pad {
            Ok(PAD_TEXT)
        } else if id == s.eot {
            Ok(EOT_TEXT)
        } else {
            self.reverse
                .get(id as usize)
                .map(|t| t.as_str())
                .ok_or_else(|| DataError::Invalid(format!("token id {id} out of range")))
        }
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.vocab.contains_key(tok)
    }

    fn rebuild_reverse(&mut self) {
        let mut rev = vec![String::new(); self.vocab.len()];
        for (tok, &id) in &self.vocab {
            rev[id as usize] = tok.clone();
        }
        self.reverse = rev;
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        #[derive(Serialize)]
        struct File<'a> {
            vocab: &'a BTreeMap<String, u32>,
            special: SpecialOut,
        }
        #[derive(Serialize)]
        struct SpecialOut {
            item: u32,
            sep: u32,
            rec: u32,
            rec_end: u32,
            pad: u32,
            eot: u32,
        }
        let s = self.special;
        let file = File {
            vocab: &self.vocab,
            special: SpecialOut {
                item: s.item,
                sep: s.sep,
                rec: s.rec,
                rec_end: s.rec_end,
                pad: s.pad,
                eot: s.eot,
            },
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| DataError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Tokenizer, DataError> {
        #[derive(Deserialize)]
        struct File {
            vocab: BTreeMap<String, u32>,
            special: SpecialIds,
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::io(path.display().to_string(), e))?;
        let file: File = serde_json::from_str(&text).map_err(|e| DataError::MalformedLine {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut tok = Tokenizer { vocab: file.vocab, special: file.special, reverse: Vec::new() };
        tok.rebuild_reverse();
        Ok(tok)
    }
}

/// Builds a frequency-ranked word vocabulary of at most `vocab_size` entries
/// (reserved ids included), deterministic given the corpus and size.
pub fn build_tokenizer(corpus_texts: &[String], vocab_size: usize) -> Result<Tokenizer, DataError> {
    let needed = RESERVED + 2;
    if vocab_size < needed {
        return Err(DataError::VocabTooSmall { given: vocab_size, needed });
    }

    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total = 0usize;
    for text in corpus_texts {
        for tok in text.split_whitespace() {
            total += 1;
            if matches!(tok, ITEM_TEXT | SEP_TEXT | REC_TEXT | REC_END_TEXT | PAD_TEXT | EOT_TEXT | UNK_TEXT)
            {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if corpus_texts.is_empty() || total == 0 {
        return Err(DataError::EmptyCorpus);
    }

    // Highest frequency first, ties broken lexicographically.
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let capacity = vocab_size - RESERVED - 1; // one slot goes to <unk>
    let mut vocab = BTreeMap::new();
    vocab.insert(UNK_TEXT.to_string(), 0u32);
    for (i, (tok, _)) in ranked.into_iter().take(capacity).enumerate() {
        vocab.insert(tok.to_string(), (i + 1) as u32);
    }

    let base = vocab.len() as u32;
    let special = SpecialIds {
        item: base,
        sep: base + 1,
        rec: base + 2,
        rec_end: base + 3,
        pad: base + 4,
        eot: base + 5,
    };
    let mut tok = Tokenizer { vocab, special, reverse: Vec::new() };
    tok.rebuild_reverse();
    Ok(tok)
}
