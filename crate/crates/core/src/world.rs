//! The toy video world standing in for text conditioning.
//!
//! A prompt embedding describes a Gaussian scene: a smooth background field
//! plus a Gaussian blob that translates linearly per frame (wrapping at the
//! borders). Clean latents are `z0 ~ N(mu[n], sigma0^2)` per element, which
//! gives the Bayes-optimal noise predictor a closed form.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, path_err, Error, Result};
use crate::latent::{Dims, LatentClip, SeededRng};
use crate::schedule::NoiseSchedule;

pub const EMBEDDING_LEN: usize = 8;
const BACKGROUND_STREAM: u64 = 0xb9_0001;
const BACKGROUND_MODES: usize = 4;

/// A conditioning prompt. Embedding layout: `[background_id, blob_amplitude,
/// blob_start_x, blob_start_y, velocity_x, velocity_y, blob_radius, reserved]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub embedding: Vec<f64>,
}

impl PromptSpec {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        let p = Self {
            id: id.into(),
            embedding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.len() < 7 {
            return Err(invalid(format!(
                "prompt {:?}: embedding needs at least 7 entries, got {}",
                self.id,
                self.embedding.len()
            )));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("prompt {:?}: non-finite embedding", self.id)));
        }
        if self.blob_radius() <= 0.0 {
            return Err(invalid(format!("prompt {:?}: blob_radius must be > 0", self.id)));
        }
        Ok(())
    }

    pub fn background_id(&self) -> u64 {
        self.embedding[0].round().max(0.0) as u64
    }

    pub fn blob_amplitude(&self) -> f64 {
        self.embedding[1]
    }

    pub fn blob_start(&self) -> (f64, f64) {
        (self.embedding[2], self.embedding[3])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.embedding[4], self.embedding[5])
    }

    pub fn blob_radius(&self) -> f64 {
        self.embedding[6]
    }
}

/// Linear interpolation `e1 + omega (e2 - e1)`.
pub fn embed_lerp(e1: &[f64], e2: &[f64], omega: f64) -> Result<Vec<f64>> {
    if e1.len() != e2.len() {
        return Err(invalid(format!(
            "embedding lengths differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| a + omega * (b - a)).collect())
}

/// Prompt id → embedding, as stored in prompt-library JSON files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptLibrary {
    entries: BTreeMap<String, Vec<f64>>,
}

impl PromptLibrary {
    pub fn from_entries(entries: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let lib = Self { entries };
        lib.validate()?;
        Ok(lib)
    }

    /// Four scenes: `a`/`b` share a background and differ only in motion,
    /// `c` is a different background, `d` is static.
    pub fn builtin() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("a".into(), vec![3.0, 1.5, 4.0, 8.0, 0.5, 0.0, 2.5, 0.0]);
        entries.insert("b".into(), vec![3.0, 1.5, 4.0, 8.0, -0.75, 0.25, 2.5, 0.0]);
        entries.insert("c".into(), vec![7.0, -1.2, 10.0, 4.0, 0.25, 0.5, 3.0, 0.0]);
        entries.insert("d".into(), vec![3.0, 1.0, 8.0, 8.0, 0.0, 0.0, 2.0, 0.0]);
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| path_err(path, e))?;
        let lib: Self = serde_json::from_str(&text)?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let mut len = None;
        for (id, e) in &self.entries {
            PromptSpec::new(id.clone(), e.clone())?;
            match len {
                None => len = Some(e.len()),
                Some(l) if l != e.len() => {
                    return Err(invalid(format!(
                        "prompt {id:?}: embedding length {} differs from {l}",
                        e.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<PromptSpec> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| invalid(format!("unknown prompt id {id:?}")))?;
        PromptSpec::new(id, e.clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, embedding: Vec<f64>) -> Result<()> {
        let p = PromptSpec::new(id, embedding)?;
        self.entries.insert(p.id, p.embedding);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub mu: LatentClip,
    pub sigma0: f64,
}

impl SceneSpec {
    /// The unconditional scene used for classifier-free guidance.
    pub fn null(dims: Dims, sigma: f64) -> Self {
        Self {
            mu: LatentClip::zeros(dims),
            sigma0: sigma,
        }
    }
}

fn wrap_offset(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

fn background(id: u64, dims: Dims) -> Vec<f64> {
    let mut rng = SeededRng::new(id).fork(BACKGROUND_STREAM);
    let (h, w) = (dims.height as f64, dims.width as f64);
    let mut field = vec![0.0; dims.frame_len()];
    for c in 0..dims.channels {
        let plane = &mut field[c * dims.height * dims.width..(c + 1) * dims.height * dims.width];
        for _ in 0..BACKGROUND_MODES {
            let kx = rng.below(3) as f64;
            let ky = rng.below(3) as f64;
            let amp = 0.5 * rng.standard_normal();
            let phase = 2.0 * PI * rng.uniform();
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let arg = 2.0 * PI * (kx * x as f64 / w + ky * y as f64 / h) + phase;
                    plane[y * dims.width + x] += amp * arg.cos();
                }
            }
        }
    }
    field
}

/// Deterministic scene for `prompt` at `dims`.
pub fn prompt_to_scene(prompt: &PromptSpec, dims: Dims, sigma0: f64) -> Result<SceneSpec> {
    prompt.validate()?;
    dims.validate()?;
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(invalid(format!("sigma0 must be > 0, got {sigma0}")));
    }
    let bg = background(prompt.background_id(), dims);
    let (sx, sy) = prompt.blob_start();
    let (vx, vy) = prompt.velocity();
    let amp = prompt.blob_amplitude();
    let inv = 1.0 / (2.0 * prompt.blob_radius().powi(2));
    let (h, w) = (dims.height as f64, dims.width as f64);
    let plane = dims.height * dims.width;

    let mut data = Vec::with_capacity(dims.len());
    for n in 0..dims.frames {
        let cx = (sx + n as f64 * vx).rem_euclid(w);
        let cy = (sy + n as f64 * vy).rem_euclid(h);
        for c in 0..dims.channels {
            for y in 0..dims.height {
                let dy = wrap_offset(y as f64 - cy, h);
                for x in 0..dims.width {
                    let dx = wrap_offset(x as f64 - cx, w);
                    let blob = amp * (-(dx * dx + dy * dy) * inv).exp();
                    data.push((bg[c * plane + y * dims.width + x] + blob) as f32);
                }
            }
        }
    }
    Ok(SceneSpec {
        mu: LatentClip::new(dims, data)?,
        sigma0,
    })
}

/// Bayes-optimal noise prediction for the Gaussian scene at noise level
/// `alpha_bar`:
///
/// `E[z0|z_t] = (sqrt(ab) s^2 z_t + (1-ab) mu) / (ab s^2 + 1 - ab)`,
/// `eps = (z_t - sqrt(ab) E[z0|z_t]) / sqrt(1-ab)`.
pub fn analytic_eps_at(scene: &SceneSpec, z_t: &LatentClip, alpha_bar: f64) -> Result<LatentClip> {
    if alpha_bar >= 1.0 {
        return Err(Error::NumericalDomain(
            "alpha_bar = 1 leaves no noise to predict".into(),
        ));
    }
    let s2 = scene.sigma0 * scene.sigma0;
    let sa = alpha_bar.sqrt();
    let s1a = (1.0 - alpha_bar).sqrt();
    let denom = alpha_bar * s2 + 1.0 - alpha_bar;
    z_t.zip_map(&scene.mu, |z, m| {
        let (z, m) = (z as f64, m as f64);
        let post = (sa * s2 * z + (1.0 - alpha_bar) * m) / denom;
        ((z - sa * post) / s1a) as f32
    })
}

pub fn analytic_eps(
    scene: &SceneSpec,
    z_t: &LatentClip,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentClip> {
    analytic_eps_at(scene, z_t, schedule.alpha_bar(t)?)
}

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`.
pub fn cfg_combine(eps_uncond: &LatentClip, eps_cond: &LatentClip, s: f64) -> Result<LatentClip> {
    eps_uncond.require_same_dims(eps_cond)?;
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| {
        let (u, c) = (u as f64, c as f64);
        (u + s * (c - u)) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    #[default]
    Identity,
}

impl Codec {
    pub fn encode(&self, x: &LatentClip) -> LatentClip {
        match self {
            Codec::Identity => x.clone(),
        }
    }

    pub fn decode(&self, z: &LatentClip) -> LatentClip {
        match self {
            Codec::Identity => z.clone(),
        }
    }
}
