use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Train/validation/test partition of a list.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub const DEFAULT_RATIOS: [u32; 3] = [6, 2, 2];

/// Partition sizes: floor(n * r / sum) for train and validation, the rest to test.
pub fn split_sizes(n: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::usage("split ratios must be positive"));
    }
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let train = (n as u64 * ratios[0] as u64 / total) as usize;
    let val = (n as u64 * ratios[1] as u64 / total) as usize;
    Ok([train, val, n - train - val])
}

/// Shuffles with `seed`, then cuts into train, validation and test.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [u32; 3], seed: u64) -> Result<Split<T>> {
    if items.is_empty() {
        return Err(Error::usage("cannot split an empty item list"));
    }
    let [train, val, _] = split_sizes(items.len(), ratios)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..train]),
        val: pick(&order[train..train + val]),
        test: pick(&order[train + val..]),
    })
}
