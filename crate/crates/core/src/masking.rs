//! Mask sampling for training and the mask-count schedule for iterative
//! refinement.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::Rng;

/// Position of the refinement loop: iteration `k` of `total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    pub total: usize,
    pub k: usize,
}

impl MaskSchedule {
    pub fn new(total: usize, k: usize) -> Result<Self> {
        if total == 0 || k == 0 || k > total {
            return Err(invalid(format!("iteration {k} outside 1..={total}")));
        }
        Ok(Self { total, k })
    }

    pub fn count(&self, length: usize) -> usize {
        length * (self.total - self.k) / self.total
    }
}

/// `⌊length · (K − k) / K⌋`.
pub fn mask_count(length: usize, k: usize, total: usize) -> Result<usize> {
    Ok(MaskSchedule::new(total, k)?.count(length))
}

/// Draws a count uniformly from `1..=N`, then masks a uniformly random subset
/// of that size. Returns the masked ids and the number of masks.
pub fn sample_mask(ids: &[u32], mask_id: u32, rng: &mut Rng) -> Result<(Vec<u32>, usize)> {
    let n = ids.len();
    if n == 0 {
        return Err(invalid("cannot mask an empty sequence"));
    }
    if ids.contains(&mask_id) {
        return Err(invalid("sequence is already masked"));
    }
    let count = rng.random_range(1..=n);
    let mut out = ids.to_vec();
    for i in index::sample(rng, n, count) {
        out[i] = mask_id;
    }
    Ok((out, count))
}

/// Masks the `count` positions with the smallest scores; equal scores mask
/// the earlier position first.
pub fn mask_lowest_confidence(
    ids: &[u32],
    scores: &[f64],
    count: usize,
    mask_id: u32,
) -> Result<Vec<u32>> {
    if ids.len() != scores.len() {
        return Err(shape_err(format!(
            "{} scores for {} tokens",
            scores.len(),
            ids.len()
        )));
    }
    if count > ids.len() {
        return Err(invalid(format!(
            "cannot mask {count} of {} tokens",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = ids.to_vec();
    for &i in &order[..count] {
        out[i] = mask_id;
    }
    Ok(out)
}
