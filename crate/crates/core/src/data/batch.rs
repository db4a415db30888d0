use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffled dataset indices for one epoch, seeded by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch; the last batch may be partial.
pub fn batch_iter<'a, T>(
    dataset: &'a [T],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let order = epoch_order(dataset.len(), seed, epoch);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(batches.into_iter().map(move |b| b.into_iter().map(|i| &dataset[i]).collect()))
}
