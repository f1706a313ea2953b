use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};

/// Indices into one split plus an optional minimum padded length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub split: Split,
    pub indices: Vec<usize>,
    /// Sequences are right-padded to at least this many positions.
    pub pad_to: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn samples<'a>(&'a self, dataset: &'a Dataset) -> impl Iterator<Item = &'a Sample> + 'a {
        let split = dataset.split(self.split);
        self.indices.iter().map(move |&i| &split[i])
    }
}

/// Mixes a run seed with an epoch (or any other stream index).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed
        ^ stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled batches covering the split exactly once. The order depends only
/// on `(seed, epoch)`; `seed == None` keeps dataset order.
pub fn batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    shuffle: Option<(u64, u64)>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let n = dataset.split(split).len();
    if n == 0 {
        return Err(Error::Contract(format!("split {split} is empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch {
            split,
            indices: c.to_vec(),
            pad_to: 0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;

    fn ds() -> Dataset {
        Dataset::generate(&DataConfig {
            pretrain: 23,
            finetune: 17,
            eval: 9,
            ..DataConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn batches_cover_split_once() {
        let d = ds();
        let b = batches(&d, Split::Pretrain, 5, Some((1, 0))).unwrap();
        assert_eq!(b.iter().map(Batch::len).sum::<usize>(), 23);
        let mut all: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn order_depends_on_seed_and_epoch() {
        let d = ds();
        let a = batches(&d, Split::Finetune, 4, Some((7, 2))).unwrap();
        assert_eq!(a, batches(&d, Split::Finetune, 4, Some((7, 2))).unwrap());
        assert_ne!(a, batches(&d, Split::Finetune, 4, Some((7, 3))).unwrap());
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        assert!(batches(&ds(), Split::Eval, 0, None).is_err());
    }
}
