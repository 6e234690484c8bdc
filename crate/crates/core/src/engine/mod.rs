//! Look-back orchestration: noise shuffles, noise replacement, consistency
//! regularization, and assembly of the long video.

mod pipeline;
pub mod regularize;
pub mod shuffle;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::{FrameRange, LatentClip};
use crate::schedule::StepRef;

pub use pipeline::{
    assemble_final, final_frame_count, run_first_clip, run_guided_stage, run_pipeline,
    run_unguided, NoiseCorruption, PipelineOptions, PipelineOutput, ShuffleKind,
};
pub use regularize::{apply_regularization, consistency_grad, content_loss, RegularizedEps};
pub use shuffle::{extending_shuffle, internal_shuffle};

/// How `td` is compared against a sampler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdUnits {
    /// Replacement while `step_index >= td` (the last `td` steps run free).
    #[default]
    StepIndex,
    /// Replacement while the training timestep is `>= td`.
    RawTimestep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub td: usize,
    pub td_units: TdUnits,
    pub delta: f64,
    pub cfg_scale: f64,
    pub regularization_enabled: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            n: 16,
            n1: 6,
            n2: 8,
            td: 10,
            td_units: TdUnits::StepIndex,
            delta: 140.0,
            cfg_scale: 1.5,
            regularization_enabled: true,
        }
    }
}

impl StageConfig {
    /// `steps` is the sampler step count and `train_timesteps` the schedule
    /// length; they bound `td` depending on its units.
    pub fn validate(&self, steps: usize, train_timesteps: usize) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.n == 0 {
            return bad("N", "must be >= 1".into());
        }
        if self.n1 == 0 || self.n1 >= self.n {
            return bad("N1", format!("must satisfy 1 <= N1 < N = {}, got {}", self.n, self.n1));
        }
        if self.n2 == 0 || self.n2 > self.n - self.n1 {
            return bad(
                "N2",
                format!("must satisfy 1 <= N2 <= N - N1 = {}, got {}", self.n - self.n1, self.n2),
            );
        }
        let td_max = match self.td_units {
            TdUnits::StepIndex => steps,
            TdUnits::RawTimestep => train_timesteps,
        };
        if self.td > td_max {
            return bad("Td", format!("must be <= {td_max}, got {}", self.td));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta", format!("must be finite and >= 0, got {}", self.delta));
        }
        if !self.cfg_scale.is_finite() {
            return bad("cfg_scale", format!("must be finite, got {}", self.cfg_scale));
        }
        Ok(())
    }

    pub fn replacement_active(&self, step: StepRef) -> bool {
        match self.td_units {
            TdUnits::StepIndex => step.step_index >= self.td,
            TdUnits::RawTimestep => step.timestep >= self.td,
        }
    }

    /// Effective regularization step; zero when disabled.
    pub fn effective_delta(&self) -> f64 {
        if self.regularization_enabled {
            self.delta
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    First,
    Extend,
    Internal,
    Extend2,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::First => "first",
            StageTag::Extend => "extend",
            StageTag::Internal => "internal",
            StageTag::Extend2 => "extend2",
        }
    }
}

/// Archive of one denoising run. `stored_eps[k]` is the noise consumed by the
/// DDIM update at loop position `k` (0 = noisiest step).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub initial_noise: LatentClip,
    pub final_latent: LatentClip,
    pub stored_eps: Vec<LatentClip>,
    pub prompt_id: String,
    pub stage_tag: StageTag,
}

impl ClipRecord {
    /// Stored noise for `step`, addressed by its index from the end.
    pub fn eps_at(&self, step: StepRef) -> Result<&LatentClip> {
        let s = self.stored_eps.len();
        if step.step_index >= s {
            return Err(Error::State(format!(
                "no stored noise for step_index {} in {} record ({s} steps stored)",
                step.step_index,
                self.stage_tag.as_str()
            )));
        }
        Ok(&self.stored_eps[s - 1 - step.step_index])
    }
}

/// Pairs of (target range in the new clip, source range in the previous clip).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceMap {
    pairs: Vec<(FrameRange, FrameRange)>,
}

impl GuidanceMap {
    pub fn new(pairs: Vec<(FrameRange, FrameRange)>, n_frames: usize) -> Result<Self> {
        for (i, (target, source)) in pairs.iter().enumerate() {
            target.check(n_frames)?;
            source.check(n_frames)?;
            if target.len() != source.len() {
                return Err(invalid(format!(
                    "guidance pair {target} <- {source} has unequal lengths"
                )));
            }
            if pairs[..i].iter().any(|(t, _)| t.overlaps(target)) {
                return Err(invalid(format!("guidance target {target} overlaps another target")));
            }
        }
        Ok(Self { pairs })
    }

    /// `[0, N1) <- [N - N1, N)`.
    pub fn extending(n: usize, n1: usize) -> Result<Self> {
        if n1 > n {
            return Err(invalid(format!("N1 = {n1} exceeds N = {n}")));
        }
        Self::new(vec![(FrameRange::new(0, n1)?, FrameRange::new(n - n1, n)?)], n)
    }

    /// `[0, N1) <- [0, N1)` and `[N - N2, N) <- [N1, N1 + N2)`.
    pub fn internal(n: usize, n1: usize, n2: usize) -> Result<Self> {
        if n1 + n2 > n {
            return Err(invalid(format!("N1 + N2 = {} exceeds N = {n}", n1 + n2)));
        }
        Self::new(
            vec![
                (FrameRange::new(0, n1)?, FrameRange::new(0, n1)?),
                (FrameRange::new(n - n2, n)?, FrameRange::new(n1, n1 + n2)?),
            ],
            n,
        )
    }

    pub fn pairs(&self) -> &[(FrameRange, FrameRange)] {
        &self.pairs
    }
}

/// Overwrites the mapped target frames of `eps` with the previous record's
/// stored noise at the same step, while the gate is open.
pub fn apply_noise_replacement(
    eps: &LatentClip,
    prev: &ClipRecord,
    map: &GuidanceMap,
    step: StepRef,
    cfg: &StageConfig,
) -> Result<LatentClip> {
    if !cfg.replacement_active(step) {
        return Ok(eps.clone());
    }
    let source = prev.eps_at(step)?;
    if !source.dims().same_frame_shape(&eps.dims()) {
        return Err(invalid(format!(
            "stored noise {} does not match frame shape of {}",
            source.dims(),
            eps.dims()
        )));
    }
    let mut out = eps.clone();
    for (target, src) in map.pairs() {
        target.check(eps.n_frames())?;
        src.check(source.n_frames())?;
        for (ti, si) in (target.start..target.end).zip(src.start..src.end) {
            out.frame_mut(ti).copy_from_slice(source.frame(si));
        }
    }
    Ok(out)
}

/// Per-step loss values of one regularized stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationTrace {
    pub stage_tag: StageTag,
    pub round: usize,
    pub delta: f64,
    pub g_before: Vec<f64>,
    pub g_after: Vec<f64>,
}

impl RegularizationTrace {
    /// `g_after / g_before` per step, `None` where `g_before` is zero.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.g_before
            .iter()
            .zip(&self.g_after)
            .map(|(&b, &a)| (b > 0.0).then(|| a / b))
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.g_before.iter().zip(&self.g_after).all(|(b, a)| a <= b)
    }
}
