//! Frame permutations applied to initial noise between stages.

use crate::error::{invalid, Result};
use crate::latent::LatentClip;

/// Source index for each output frame of the extending shuffle: the last `n1`
/// frames in order, then the remaining frames reversed.
pub fn extending_order(n: usize, n1: usize) -> Result<Vec<usize>> {
    if n1 == 0 || n1 > n {
        return Err(invalid(format!("N1 must be in [1, {n}], got {n1}")));
    }
    Ok((0..n)
        .map(|i| if i < n1 { n - n1 + i } else { n - 1 - i })
        .collect())
}

/// Source index for each output frame of the internal shuffle: the head
/// `n1` frames, then the tail after `n1 + n2`, then the block `[n1, n1 + n2)`.
pub fn internal_order(n: usize, n1: usize, n2: usize) -> Result<Vec<usize>> {
    if n1 + n2 > n {
        return Err(invalid(format!("N1 + N2 = {} exceeds N = {n}", n1 + n2)));
    }
    Ok((0..n1).chain(n1 + n2..n).chain(n1..n1 + n2).collect())
}

pub fn extending_shuffle(z: &LatentClip, n1: usize) -> Result<LatentClip> {
    z.permute_frames(&extending_order(z.n_frames(), n1)?)
}

pub fn internal_shuffle(z: &LatentClip, n1: usize, n2: usize) -> Result<LatentClip> {
    z.permute_frames(&internal_order(z.n_frames(), n1, n2)?)
}
