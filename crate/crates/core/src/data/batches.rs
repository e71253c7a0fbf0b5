use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Shuffled clip indices for one epoch, split into batches; the last batch
/// may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Batches {
    pub fn new(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(DataError::Contract("batch_size must be >= 1".into()));
        }
        if len == 0 {
            return Err(DataError::Contract("cannot batch an empty split".into()));
        }
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch)));
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            next: 0,
        })
    }

    /// The epoch's permutation.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.order[self.next..end].to_vec();
        self.next = end;
        Some(batch)
    }
}

/// All batches of an epoch.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    Ok(Batches::new(len, batch_size, seed, epoch)?.collect())
}

/// Pairs two batch lists step by step; the shorter list restarts from its
/// beginning until the longer one is exhausted.
pub fn cycle_zip(a: Vec<Vec<usize>>, b: Vec<Vec<usize>>) -> Vec<(Vec<usize>, Vec<usize>)> {
    let steps = a.len().max(b.len());
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    (0..steps)
        .map(|i| (a[i % a.len()].clone(), b[i % b.len()].clone()))
        .collect()
}
