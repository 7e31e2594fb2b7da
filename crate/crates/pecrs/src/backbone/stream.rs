//! Mixed token/embedding input streams and the attention masks the model
//! supports: plain causal, and the re-ranking mask where candidate items
//! attend to the dialogue context and themselves only.

use ndarray::Array1;

/// One input position: either a vocabulary token id or an injected
/// d_model vector (item representations).
#[derive(Debug, Clone)]
pub enum Slot {
    Token(u32),
    Vector(Array1<f64>),
}

/// Per-row attention pattern. `Prefix(k)` allows keys `0..k`;
/// `PrefixPlusSelf` allows the context prefix plus the row's own position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRow {
    Prefix(usize),
    PrefixPlusSelf { prefix: usize, own: usize },
}

impl MaskRow {
    pub fn allows(&self, j: usize) -> bool {
        match *self {
            MaskRow::Prefix(k) => j < k,
            MaskRow::PrefixPlusSelf { prefix, own } => j < prefix || j == own,
        }
    }

    pub fn key_count(&self) -> usize {
        match *self {
            MaskRow::Prefix(k) => k,
            MaskRow::PrefixPlusSelf { prefix, own } => prefix + usize::from(own >= prefix),
        }
    }

    /// Allowed key indices in ascending order.
    pub fn keys(&self) -> impl Iterator<Item = usize> {
        let (k, own) = match *self {
            MaskRow::Prefix(k) => (k, None),
            MaskRow::PrefixPlusSelf { prefix, own } => {
                (prefix, if own >= prefix { Some(own) } else { None })
            }
        };
        (0..k).chain(own)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: Vec<MaskRow>,
}

impl AttnMask {
    /// Standard causal mask: row i attends to 0..=i.
    pub fn causal(len: usize) -> AttnMask {
        AttnMask { rows: (0..len).map(|i| MaskRow::Prefix(i + 1)).collect() }
    }

    /// Re-ranking mask: context rows are causal over the context, each of
    /// the `n_candidates` rows after the context attends to the whole
    /// context and to itself only.
    pub fn rerank(context_len: usize, n_candidates: usize) -> AttnMask {
        let mut rows: Vec<MaskRow> = (0..context_len).map(|i| MaskRow::Prefix(i + 1)).collect();
        for c in 0..n_candidates {
            rows.push(MaskRow::PrefixPlusSelf { prefix: context_len, own: context_len + c });
        }
        AttnMask { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> MaskRow {
        self.rows[i]
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.rows[i].allows(j)
    }

    /// Dense boolean view (query-position x key-position).
    pub fn to_bool_matrix(&self) -> Vec<Vec<bool>> {
        let n = self.rows.len();
        (0..n).map(|i| (0..n).map(|j| self.is_allowed(i, j)).collect()).collect()
    }
}

/// Builds the re-ranking attention mask as a boolean matrix over
/// `context_len + n_candidates` positions.
pub fn build_rerank_mask(context_len: usize, n_candidates: usize) -> Vec<Vec<bool>> {
    AttnMask::rerank(context_len, n_candidates).to_bool_matrix()
}

/// An assembled model input: slots, per-slot positional-embedding flags,
/// and the attention mask.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub slots: Vec<Slot>,
    pub use_position: Vec<bool>,
    pub mask: AttnMask,
}

impl TokenStream {
    /// Causal stream of plain tokens, positions enabled everywhere.
    pub fn from_tokens(ids: &[u32]) -> TokenStream {
        TokenStream {
            slots: ids.iter().map(|&id| Slot::Token(id)).collect(),
            use_position: vec![true; ids.len()],
            mask: AttnMask::causal(ids.len()),
        }
    }

    /// Causal stream from pre-built slots, positions enabled everywhere.
    pub fn causal(slots: Vec<Slot>) -> TokenStream {
        let n = slots.len();
        TokenStream { slots, use_position: vec![true; n], mask: AttnMask::causal(n) }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Appends a token slot and re-extends the causal mask. Only valid for
    /// purely causal streams (generation).
    pub fn push_token(&mut self, id: u32) {
        self.slots.push(Slot::Token(id));
        self.use_position.push(true);
        self.mask = AttnMask::causal(self.slots.len());
    }

    /// Appends position-free injected candidate slots under the re-rank
    /// mask; the existing stream becomes the context.
    pub fn with_candidates(&self, candidates: &[Array1<f64>]) -> TokenStream {
        let ctx = self.slots.len();
        let mut slots = self.slots.clone();
        let mut use_position = self.use_position.clone();
        for v in candidates {
            slots.push(Slot::Vector(v.clone()));
            use_position.push(false);
        }
        TokenStream { slots, use_position, mask: AttnMask::rerank(ctx, candidates.len()) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerank_mask_matches_stated_rows() {
        let m = build_rerank_mask(3, 2);
        assert_eq!(m.len(), 5);
        assert_eq!(m[3], vec![true, true, true, true, false]);
        assert_eq!(m[4], vec![true, true, true, false, true]);
        // context rows stay causal
        assert_eq!(m[0], vec![true, false, false, false, false]);
        assert_eq!(m[2], vec![true, true, true, false, false]);
    }

    #[test]
    fn single_candidate_row_is_context_plus_self() {
        let m = build_rerank_mask(4, 1);
        assert_eq!(m[4], vec![true, true, true, true, true]);
    }

    #[test]
    fn candidate_columns_have_unit_column_sum() {
        for (l, c) in [(1, 1), (3, 2), (5, 7), (2, 4)] {
            let m = build_rerank_mask(l, c);
            for col in l..l + c {
                let sum: usize = m.iter().map(|row| usize::from(row[col])).sum();
                assert_eq!(sum, 1, "column {col} of ({l},{c})");
            }
        }
    }

    #[test]
    fn mask_row_keys_ascend() {
        let row = MaskRow::PrefixPlusSelf { prefix: 3, own: 5 };
        let keys: Vec<usize> = row.keys().collect();
        assert_eq!(keys, vec![0, 1, 2, 5]);
        assert_eq!(row.key_count(), 4);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttnMask::causal(4).to_bool_matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, &ok) in row.iter().enumerate() {
                assert_eq!(ok, j <= i);
            }
        }
    }
}
