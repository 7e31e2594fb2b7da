//! Negative-item sampling, shared across batch elements and across the
//! recall/rerank losses of one step.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::ItemBank;
use crate::error::ModelError;

/// Samples `m` distinct item ids uniformly from the bank, excluding every
/// positive in the batch.
pub fn sample_negatives(
    bank: &ItemBank,
    batch_positives: &BTreeSet<u32>,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<u32>, ModelError> {
    let mut complement: Vec<u32> = bank.ids().filter(|id| !batch_positives.contains(id)).collect();
    if complement.len() < m {
        return Err(ModelError::NotEnoughNegatives { m, available: complement.len() });
    }
    // Partial Fisher-Yates: the first m entries are a uniform sample.
    for i in 0..m {
        let j = rng.gen_range(i..complement.len());
        complement.swap(i, j);
    }
    complement.truncate(m);
    Ok(complement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;
    use rand::SeedableRng;

    fn bank(n: u32) -> ItemBank {
        ItemBank::new(
            (0..n)
                .map(|i| ItemRecord {
                    id: i,
                    title: format!("t{i}"),
                    actors: vec![],
                    directors: vec![],
                    genres: vec![],
                    plot: String::new(),
                    description: String::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_avoids_positives_and_is_distinct() {
        let bank = bank(10);
        let positives: BTreeSet<u32> = [3, 7].into();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let sample = sample_negatives(&bank, &positives, 4, &mut rng).unwrap();
        assert_eq!(sample.len(), 4);
        let set: BTreeSet<u32> = sample.iter().copied().collect();
        assert_eq!(set.len(), 4);
        assert!(set.is_disjoint(&positives));
    }

    #[test]
    fn exhaustive_sample_is_the_full_complement() {
        let bank = bank(6);
        let positives: BTreeSet<u32> = [1, 4].into();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sample = sample_negatives(&bank, &positives, 4, &mut rng).unwrap();
        let set: BTreeSet<u32> = sample.into_iter().collect();
        assert_eq!(set, [0, 2, 3, 5].into());
    }

    #[test]
    fn fixed_seed_reproduces_the_sample() {
        let bank = bank(50);
        let positives: BTreeSet<u32> = [10].into();
        let a = sample_negatives(&bank, &positives, 8, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(&bank, &positives, 8, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_pool_errors() {
        let bank = bank(5);
        let positives: BTreeSet<u32> = [0, 1, 2].into();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(
            sample_negatives(&bank, &positives, 3, &mut rng),
            Err(ModelError::NotEnoughNegatives { available: 2, .. })
        ));
    }
}
