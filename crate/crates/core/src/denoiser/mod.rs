//! The noise-predictor boundary: `eps_hat = eps_theta(z_t; c, t)` with
//! classifier-free guidance folded in.

pub mod bridge;
pub mod wire;

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::latent::{Dims, LatentClip};
use crate::schedule::{NoiseSchedule, StepRef};
use crate::world::{analytic_eps_at, cfg_combine, prompt_to_scene, PromptSpec, SceneSpec};

pub use bridge::{BridgeSession, BridgeTarget};

pub trait NoisePredictor {
    /// Latent shape this predictor accepts.
    fn dims(&self) -> Dims;

    fn supports_prompt(&self, _prompt_id: &str) -> bool {
        true
    }

    /// CFG-combined noise prediction for `z_t` at `step`. Never mutates `z_t`.
    fn predict(
        &mut self,
        z_t: &LatentClip,
        prompt: &PromptSpec,
        step: StepRef,
        cfg_scale: f64,
    ) -> Result<LatentClip>;
}

pub(crate) fn check_dims(expected: Dims, z_t: &LatentClip) -> Result<()> {
    if z_t.dims() != expected {
        return Err(invalid(format!(
            "predictor expects {expected}, got {}",
            z_t.dims()
        )));
    }
    Ok(())
}

/// Bayes-optimal predictor for the toy Gaussian world.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    schedule: NoiseSchedule,
    dims: Dims,
    sigma0: f64,
    null: SceneSpec,
    scenes: HashMap<String, (Vec<f64>, SceneSpec)>,
}

impl AnalyticPredictor {
    pub const DEFAULT_SIGMA0: f64 = 0.3;
    pub const DEFAULT_SIGMA_UNCOND: f64 = 2.0;

    pub fn new(schedule: NoiseSchedule, dims: Dims, sigma0: f64, sigma_uncond: f64) -> Result<Self> {
        dims.validate()?;
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(invalid(format!("sigma0 must be > 0, got {sigma0}")));
        }
        if !(sigma_uncond > 0.0 && sigma_uncond.is_finite()) {
            return Err(invalid(format!("sigma_uncond must be > 0, got {sigma_uncond}")));
        }
        Ok(Self {
            schedule,
            dims,
            sigma0,
            null: SceneSpec::null(dims, sigma_uncond),
            scenes: HashMap::new(),
        })
    }

    pub fn with_defaults(schedule: NoiseSchedule, dims: Dims) -> Result<Self> {
        Self::new(schedule, dims, Self::DEFAULT_SIGMA0, Self::DEFAULT_SIGMA_UNCOND)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn scene(&mut self, prompt: &PromptSpec) -> Result<&SceneSpec> {
        let stale = match self.scenes.get(&prompt.id) {
            Some((emb, _)) => emb != &prompt.embedding,
            None => true,
        };
        if stale {
            let scene = prompt_to_scene(prompt, self.dims, self.sigma0)?;
            self.scenes
                .insert(prompt.id.clone(), (prompt.embedding.clone(), scene));
        }
        Ok(&self.scenes[&prompt.id].1)
    }

    pub fn unconditional(&self, z_t: &LatentClip, t: usize) -> Result<LatentClip> {
        analytic_eps_at(&self.null, z_t, self.schedule.alpha_bar(t)?)
    }

    pub fn conditional(&mut self, z_t: &LatentClip, prompt: &PromptSpec, t: usize) -> Result<LatentClip> {
        let ab = self.schedule.alpha_bar(t)?;
        let scene = self.scene(prompt)?;
        analytic_eps_at(scene, z_t, ab)
    }
}

impl NoisePredictor for AnalyticPredictor {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn predict(
        &mut self,
        z_t: &LatentClip,
        prompt: &PromptSpec,
        step: StepRef,
        cfg_scale: f64,
    ) -> Result<LatentClip> {
        check_dims(self.dims, z_t)?;
        let eps_u = self.unconditional(z_t, step.timestep)?;
        let eps_c = self.conditional(z_t, prompt, step.timestep)?;
        cfg_combine(&eps_u, &eps_c, cfg_scale)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn dims(&self) -> Dims {
        (**self).dims()
    }

    fn supports_prompt(&self, prompt_id: &str) -> bool {
        (**self).supports_prompt(prompt_id)
    }

    fn predict(
        &mut self,
        z_t: &LatentClip,
        prompt: &PromptSpec,
        step: StepRef,
        cfg_scale: f64,
    ) -> Result<LatentClip> {
        (**self).predict(z_t, prompt, step, cfg_scale)
    }
}
