//! Content-consistency loss between adjacent clips and its gradient step.
//!
//! A clip's content is the frame-axis mean of its predicted noise. The loss
//! is the mean squared difference of the two contents over the `P` pixels of
//! a frame, so the gradient with respect to every frame of the current noise
//! is `2 / (N·P) · (content_cur − content_ref)`.

use crate::error::{invalid, Result};
use crate::latent::LatentClip;

pub fn content_loss(eps_ref: &LatentClip, eps_cur: &LatentClip) -> Result<f64> {
    eps_ref.require_same_dims(eps_cur)?;
    eps_ref.frame_mean().mse(&eps_cur.frame_mean())
}

/// `(content_cur − content_ref)` per pixel, in f64.
fn content_diff(eps_ref: &LatentClip, eps_cur: &LatentClip) -> Result<Vec<f64>> {
    eps_ref.require_same_dims(eps_cur)?;
    let n = eps_cur.n_frames() as f64;
    let len = eps_cur.dims().frame_len();
    let mut diff = vec![0.0f64; len];
    for (fc, fr) in eps_cur.frames().zip(eps_ref.frames()) {
        for ((d, &c), &r) in diff.iter_mut().zip(fc).zip(fr) {
            *d += c as f64 - r as f64;
        }
    }
    diff.iter_mut().for_each(|d| *d /= n);
    Ok(diff)
}

/// Gradient of [`content_loss`] w.r.t. `eps_cur`; every frame is identical.
pub fn consistency_grad(eps_ref: &LatentClip, eps_cur: &LatentClip) -> Result<LatentClip> {
    let diff = content_diff(eps_ref, eps_cur)?;
    let dims = eps_cur.dims();
    let scale = 2.0 / (dims.frames * dims.frame_len()) as f64;
    let frame: Vec<f32> = diff.iter().map(|d| (scale * d) as f32).collect();
    let data = frame.iter().copied().cycle().take(dims.len()).collect();
    Ok(LatentClip::from_parts(dims, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedEps {
    pub eps: LatentClip,
    pub g_before: f64,
    pub g_after: f64,
}

/// One gradient step of size `delta` on `eps_cur`, `eps_ref` held constant.
pub fn apply_regularization(
    eps_cur: &LatentClip,
    eps_ref: &LatentClip,
    delta: f64,
) -> Result<RegularizedEps> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(invalid(format!("delta must be finite and >= 0, got {delta}")));
    }
    let g_before = content_loss(eps_ref, eps_cur)?;
    if delta == 0.0 {
        return Ok(RegularizedEps {
            eps: eps_cur.clone(),
            g_before,
            g_after: g_before,
        });
    }
    let diff = content_diff(eps_ref, eps_cur)?;
    let dims = eps_cur.dims();
    let step = delta * 2.0 / (dims.frames * dims.frame_len()) as f64;
    let len = dims.frame_len();
    let data = eps_cur
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - step * diff[i % len]) as f32)
        .collect();
    let eps = LatentClip::new(dims, data)?;
    let g_after = content_loss(eps_ref, &eps)?;
    Ok(RegularizedEps {
        eps,
        g_before,
        g_after,
    })
}

/// Factor by which one step scales the content difference.
pub fn contraction_factor(n_frames: usize, frame_len: usize, delta: f64) -> f64 {
    1.0 - 2.0 * delta / (n_frames * frame_len) as f64
}
