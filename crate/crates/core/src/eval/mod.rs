//! Oracles and toy-scale consistency metrics.

pub mod suite;

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::engine::{run_unguided, ClipRecord, StageConfig, StageTag};
use crate::error::{invalid, Result};
use crate::latent::{concat_frames, FrameRange, LatentClip, SeededRng};
use crate::schedule::{NoiseSchedule, SamplerPlan};
use crate::world::{Codec, PromptSpec, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: LatentClip,
    pub std_error: LatentClip,
}

/// Monte-Carlo estimate of `E[eps | z_t = probe]` by self-normalized
/// importance sampling: `z0` is drawn from the scene prior per element and
/// weighted by the forward-process likelihood of the probe.
pub fn mc_posterior_oracle(
    scene: &SceneSpec,
    t: usize,
    schedule: &NoiseSchedule,
    probe: &LatentClip,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<McEstimate> {
    probe.require_same_dims(&scene.mu)?;
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let dims = probe.dims();
    let mut mean = Vec::with_capacity(dims.len());
    let mut se = Vec::with_capacity(dims.len());
    let mut logw = vec![0.0f64; samples];
    let mut eps = vec![0.0f64; samples];
    for (&z, &mu) in probe.data().iter().zip(scene.mu.data()) {
        let (z, mu) = (z as f64, mu as f64);
        for (lw, e) in logw.iter_mut().zip(eps.iter_mut()) {
            let x0 = mu + scene.sigma0 * rng.standard_normal();
            *e = (z - sa * x0) / s1a;
            *lw = -0.5 * *e * *e;
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut sw, mut swe) = (0.0, 0.0);
        for (lw, e) in logw.iter_mut().zip(&eps) {
            *lw = (*lw - max).exp();
            sw += *lw;
            swe += *lw * e;
        }
        let est = swe / sw;
        let var: f64 = logw
            .iter()
            .zip(&eps)
            .map(|(w, e)| (w * (e - est)).powi(2))
            .sum::<f64>()
            / (sw * sw);
        mean.push(est as f32);
        se.push(var.sqrt() as f32);
    }
    Ok(McEstimate {
        mean: LatentClip::new(dims, mean)?,
        std_error: LatentClip::new(dims, se)?,
    })
}

/// Content loss recomputed with plain loops over f64 values.
fn naive_content_loss(dims: crate::latent::Dims, r: &[f64], c: &[f64]) -> f64 {
    let (n, p) = (dims.frames, dims.frame_len());
    let mut g = 0.0;
    for j in 0..p {
        let (mut mr, mut mc) = (0.0, 0.0);
        for f in 0..n {
            mr += r[f * p + j];
            mc += c[f * p + j];
        }
        let d = mr / n as f64 - mc / n as f64;
        g += d * d;
    }
    g / p as f64
}

/// Central differences of the content loss w.r.t. each element of `eps_cur`.
pub fn finite_diff_grad(eps_ref: &LatentClip, eps_cur: &LatentClip, h: f64) -> Result<LatentClip> {
    eps_ref.require_same_dims(eps_cur)?;
    if !(h > 0.0) {
        return Err(invalid(format!("step h must be > 0, got {h}")));
    }
    let dims = eps_cur.dims();
    let r: Vec<f64> = eps_ref.data().iter().map(|&v| v as f64).collect();
    let mut c: Vec<f64> = eps_cur.data().iter().map(|&v| v as f64).collect();
    let mut grad = Vec::with_capacity(c.len());
    for i in 0..c.len() {
        let orig = c[i];
        c[i] = orig + h;
        let up = naive_content_loss(dims, &r, &c);
        c[i] = orig - h;
        let down = naive_content_loss(dims, &r, &c);
        c[i] = orig;
        grad.push(((up - down) / (2.0 * h)) as f32);
    }
    LatentClip::new(dims, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub stage_tags: Vec<StageTag>,
    pub prompt_ids: Vec<String>,
    /// Frame-mean of each decoded clip, flattened.
    pub contents: Vec<Vec<f32>>,
    /// RMS distance of each clip's content to the first clip's content.
    pub drift: Vec<f64>,
    /// Cosines between consecutive frames of the assembled video, if attached.
    pub adjacent_cosines: Vec<Option<f64>>,
}

impl DriftReport {
    pub fn final_drift(&self) -> f64 {
        *self.drift.last().expect("at least two records")
    }
}

fn rms_distance(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    (s / a.len() as f64).sqrt()
}

pub fn content_drift(records: &[ClipRecord], codec: Codec) -> Result<DriftReport> {
    if records.len() < 2 {
        return Err(invalid("content drift needs at least two records"));
    }
    let contents: Vec<Vec<f32>> = records
        .iter()
        .map(|r| codec.decode(&r.final_latent).frame_mean().into_data())
        .collect();
    for r in &records[1..] {
        records[0].final_latent.require_same_dims(&r.final_latent)?;
    }
    let drift = contents.iter().map(|c| rms_distance(c, &contents[0])).collect();
    Ok(DriftReport {
        stage_tags: records.iter().map(|r| r.stage_tag).collect(),
        prompt_ids: records.iter().map(|r| r.prompt_id.clone()).collect(),
        contents,
        drift,
        adjacent_cosines: Vec::new(),
    })
}

/// Cosine of each pair of consecutive flattened frames; `None` when either
/// frame has zero norm.
pub fn adjacent_cosine(clip: &LatentClip) -> Result<Vec<Option<f64>>> {
    if clip.n_frames() < 2 {
        return Err(invalid("adjacent cosine needs at least two frames"));
    }
    let frames: Vec<&[f32]> = clip.frames().collect();
    Ok(frames
        .windows(2)
        .map(|w| {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in w[0].iter().zip(w[1]) {
                let (a, b) = (a as f64, b as f64);
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            (na > 0.0 && nb > 0.0).then(|| (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
        })
        .collect())
}

/// Median of the defined entries; `None` if there are none.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Unconstrained baseline with the same segment layout as the assembled
/// video: an `N`-frame clip of `prompts[0]`, then per later prompt an
/// independent clip sliced to `[N1, N-N1)` and another full independent clip.
/// Every clip draws fresh noise from `rng`.
pub fn independent_concatenation(
    predictor: &mut dyn NoisePredictor,
    prompts: &[PromptSpec],
    cfg: &StageConfig,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<LatentClip> {
    let (first, later) = prompts
        .split_first()
        .ok_or_else(|| invalid("at least one prompt is required"))?;
    let dims = predictor.dims();
    let mut clip = |p: &PromptSpec, rng: &mut SeededRng| -> Result<LatentClip> {
        let z = LatentClip::sample_standard_normal(rng, dims)?;
        Ok(run_unguided(predictor, p, z, cfg, plan, schedule, StageTag::First)?.final_latent)
    };
    let mut parts = vec![clip(first, rng)?];
    for p in later {
        let mid = clip(p, rng)?;
        if cfg.n > 2 * cfg.n1 {
            parts.push(mid.slice_frames(FrameRange::new(cfg.n1, cfg.n - cfg.n1)?)?);
        }
        parts.push(clip(p, rng)?);
    }
    concat_frames(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::consistency_grad;
    use crate::latent::Dims;
    use crate::world::analytic_eps;

    #[test]
    fn fd_matches_closed_form() {
        let mut rng = SeededRng::new(3);
        let dims = Dims::new(4, 1, 2, 2).unwrap();
        let a = LatentClip::sample_standard_normal(&mut rng, dims).unwrap();
        let b = LatentClip::sample_standard_normal(&mut rng, dims).unwrap();
        let fd = finite_diff_grad(&a, &b, 1e-3).unwrap();
        let g = consistency_grad(&a, &b).unwrap();
        for (x, y) in fd.data().iter().zip(g.data()) {
            assert!((x - y).abs() < 1e-4);
        }
        let zero = finite_diff_grad(&a, &a, 1e-3).unwrap();
        assert!(zero.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn mc_oracle_small_case() {
        let schedule = NoiseSchedule::default();
        let dims = Dims::new(1, 1, 2, 2).unwrap();
        let mut rng = SeededRng::new(11);
        let mu = LatentClip::sample_standard_normal(&mut rng, dims).unwrap();
        let scene = SceneSpec { mu, sigma0: 0.7 };
        let probe = LatentClip::sample_standard_normal(&mut rng, dims).unwrap();
        let est = mc_posterior_oracle(&scene, 400, &schedule, &probe, 100_000, &mut rng).unwrap();
        let exact = analytic_eps(&scene, &probe, 400, &schedule).unwrap();
        for ((m, s), e) in est.mean.data().iter().zip(est.std_error.data()).zip(exact.data()) {
            assert!((m - e).abs() <= 3.0 * s, "{m} vs {e} (se {s})");
        }
    }

    #[test]
    fn cosine_edge_cases() {
        let dims = Dims::new(3, 1, 1, 2).unwrap();
        let c = LatentClip::new(dims, vec![1.0, 2.0, -1.0, -2.0, 0.0, 0.0]).unwrap();
        let cos = adjacent_cosine(&c).unwrap();
        assert!((cos[0].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cos[1], None);
        let same = LatentClip::filled(dims, 0.5);
        assert!(adjacent_cosine(&same).unwrap().iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn median_of_defined_entries() {
        assert_eq!(median([Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median([Some(1.0), Some(2.0)]), Some(1.5));
        assert_eq!(median([None]), None);
    }
}
