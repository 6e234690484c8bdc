//! Noise schedules and the deterministic (eta = 0) DDIM reverse step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::LatentClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(
        train_timesteps: usize,
        beta_start: f64,
        beta_end: f64,
        kind: BetaKind,
    ) -> Result<Self> {
        if train_timesteps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "beta bounds must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let (lo, hi) = match kind {
            BetaKind::Linear => (beta_start, beta_end),
            BetaKind::ScaledLinear => (beta_start.sqrt(), beta_end.sqrt()),
        };
        let betas: Vec<f64> = linspace(lo, hi, train_timesteps)
            .map(|b| match kind {
                BetaKind::Linear => b,
                BetaKind::ScaledLinear => b * b,
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let schedule = Self {
            betas,
            alphas,
            alpha_bars,
        };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    fn check_invariants(&self) -> Result<()> {
        for (t, (&b, &ab)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::NumericalDomain(format!("beta[{t}] = {b} outside (0, 1)")));
            }
            if !(ab > 0.0 && ab < 1.0) {
                return Err(Error::NumericalDomain(format!(
                    "alpha_bar[{t}] = {ab} outside (0, 1)"
                )));
            }
            if t > 0 && ab >= self.alpha_bars[t - 1] {
                return Err(Error::NumericalDomain(format!(
                    "alpha_bar not strictly decreasing at t={t}"
                )));
            }
        }
        Ok(())
    }

    pub fn train_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            invalid(format!(
                "timestep {t} out of range for T={}",
                self.train_timesteps()
            ))
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::build(1000, 0.00085, 0.012, BetaKind::ScaledLinear).expect("default schedule is valid")
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| if i + 1 == n && n > 1 { hi } else { lo + step * i as f64 })
}

/// A sampler step addressed from the end of sampling (`step_index` 0 is the
/// final denoising step).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRef {
    pub step_index: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerPlan {
    timesteps: Vec<usize>,
}

impl SamplerPlan {
    /// `S` timesteps strided uniformly over `[0, T)`, largest first:
    /// `timesteps[k] = T - 1 - k * (T / S)`.
    pub fn new(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        let t = schedule.train_timesteps();
        if steps == 0 || steps > t {
            return Err(invalid(format!(
                "sampler steps must be in [1, {t}], got {steps}"
            )));
        }
        let stride = t / steps;
        let timesteps = (0..steps).map(|k| t - 1 - k * stride).collect();
        Ok(Self { timesteps })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn eta(&self) -> f64 {
        0.0
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The step visited at loop position `pos` (0 = first, noisiest step).
    pub fn step_at(&self, pos: usize) -> StepRef {
        StepRef {
            step_index: self.steps() - 1 - pos,
            timestep: self.timesteps[pos],
        }
    }

    /// Timestep the update at `pos` lands on, `None` for the terminal step.
    pub fn prev_timestep(&self, pos: usize) -> Option<usize> {
        self.timesteps.get(pos + 1).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, StepRef, Option<usize>)> + '_ {
        (0..self.steps()).map(|pos| (pos, self.step_at(pos), self.prev_timestep(pos)))
    }
}

/// Closed-form forward marginal `sqrt(ab)·z0 + sqrt(1-ab)·eps`.
pub fn add_noise(
    schedule: &NoiseSchedule,
    z0: &LatentClip,
    eps: &LatentClip,
    t: usize,
) -> Result<LatentClip> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| (a * z as f64 + b * e as f64) as f32)
}

/// Deterministic DDIM update from `t` to `t_prev` (`None` = terminal, where
/// `alpha_bar_prev = 1` and the clean estimate is returned).
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &LatentClip,
    eps_hat: &LatentClip,
    t: usize,
    t_prev: Option<usize>,
) -> Result<LatentClip> {
    z_t.require_same_dims(eps_hat)?;
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) if tp >= t => {
            return Err(invalid(format!("t_prev {tp} must precede t {t}")));
        }
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    ddim_step_alpha(z_t, eps_hat, ab, ab_prev)
}

/// DDIM update between two explicit alpha_bar values.
pub fn ddim_step_alpha(
    z_t: &LatentClip,
    eps_hat: &LatentClip,
    ab: f64,
    ab_prev: f64,
) -> Result<LatentClip> {
    if ab <= 0.0 {
        return Err(Error::NumericalDomain("alpha_bar_t = 0 in DDIM step".into()));
    }
    if ab == ab_prev {
        return Ok(z_t.clone());
    }
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, s1p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z_t.zip_map(eps_hat, |z, e| {
        let (z, e) = (z as f64, e as f64);
        let x0 = (z - s1a * e) / sa;
        (sp * x0 + s1p * e) as f32
    })
}
