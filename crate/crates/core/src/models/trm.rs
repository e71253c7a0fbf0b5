//! Multi-scale temporal relations over ordered frame subsets.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Result, TrmOutput};
use crate::tensor::Var;

/// Scales with more ordered subsets than this are sampled.
pub const MAX_SUBSETS: usize = 10;

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All increasing `k`-tuples of `0..frames` in lexicographic order.
fn combinations(frames: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        let mut i = k;
        while i > 0 && current[i - 1] == frames - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        current[i - 1] += 1;
        for j in i..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// Ordered frame subsets used at scale `k`: every combination when there are
/// at most [`MAX_SUBSETS`], otherwise a seeded sample of that many, kept in
/// lexicographic order.
pub fn relation_subsets(frames: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let all = combinations(frames, k);
    if all.len() <= MAX_SUBSETS {
        return all;
    }
    debug_assert_eq!(all.len(), binomial(frames, k));
    let mix = seed ^ ((frames as u64) << 32) ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut picked = sample(&mut rng, all.len(), MAX_SUBSETS).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

pub(super) fn forward<'g>(
    scales: &[usize],
    seed: u64,
    frame_embeddings: Var<'g>,
    clips: usize,
    frames: usize,
    mut relation: impl FnMut(usize, Var<'g>) -> Result<Var<'g>>,
) -> Result<TrmOutput<'g>> {
    let shape = frame_embeddings.shape();
    if shape.len() != 2 || shape[0] != clips * frames {
        return Err(ModelError::Contract(format!(
            "frame embeddings {shape:?} do not hold {clips} clips of {frames} frames"
        )));
    }
    let frame_rows: Vec<Vec<usize>> = (0..frames)
        .map(|t| (0..clips).map(|c| c * frames + t).collect())
        .collect();
    let mut per_frame = Vec::with_capacity(frames);
    for rows in &frame_rows {
        per_frame.push(frame_embeddings.select_rows(rows)?);
    }

    let mut relations = Vec::with_capacity(scales.len());
    for (s, &k) in scales.iter().enumerate() {
        if k > frames {
            return Err(ModelError::Contract(format!(
                "scale {k} needs at least {k} frames, got {frames}"
            )));
        }
        let subsets = relation_subsets(frames, k, seed);
        let mut acc: Option<Var<'g>> = None;
        for subset in &subsets {
            let parts: Vec<Var<'g>> = subset.iter().map(|&t| per_frame[t]).collect();
            let r = relation(s, Var::concat(&parts, 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(r)?,
                None => r,
            });
        }
        relations.push(acc.expect("non-empty subsets").scalar_mul(1.0 / subsets.len() as f64));
    }
    let mut video = relations[0];
    for r in &relations[1..] {
        video = video.add(*r)?;
    }
    Ok(TrmOutput { relations, video })
}
