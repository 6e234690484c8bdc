use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::regularize::apply_regularization;
use super::shuffle::{extending_shuffle, internal_shuffle};
use super::{
    apply_noise_replacement, ClipRecord, GuidanceMap, RegularizationTrace, StageConfig, StageTag,
};
use crate::denoiser::NoisePredictor;
use crate::error::{invalid, Result};
use crate::latent::{concat_frames, FrameRange, LatentClip, SeededRng};
use crate::schedule::{ddim_step, NoiseSchedule, SamplerPlan};
use crate::world::PromptSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleKind {
    Extending,
    Internal,
}

/// Replaces one frame of a round's first extending-stage initial noise with a
/// fresh draw from the run RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseCorruption {
    pub round: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub corrupt: Option<NoiseCorruption>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub final_latent: LatentClip,
    pub records: Vec<ClipRecord>,
    pub traces: Vec<RegularizationTrace>,
}

pub fn final_frame_count(n: usize, n1: usize, rounds: usize) -> usize {
    n + rounds * (2 * n - 2 * n1)
}

fn check_predictor(predictor: &dyn NoisePredictor, prompt: &PromptSpec, cfg: &StageConfig) -> Result<()> {
    let dims = predictor.dims();
    if dims.frames != cfg.n {
        return Err(invalid(format!(
            "predictor produces {} frames per clip, config has N = {}",
            dims.frames, cfg.n
        )));
    }
    if !predictor.supports_prompt(&prompt.id) {
        return Err(invalid(format!("predictor does not support prompt {:?}", prompt.id)));
    }
    Ok(())
}

/// Plain DDIM loop from `initial_noise`, storing every predicted noise.
pub fn run_unguided(
    predictor: &mut dyn NoisePredictor,
    prompt: &PromptSpec,
    initial_noise: LatentClip,
    cfg: &StageConfig,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    stage_tag: StageTag,
) -> Result<ClipRecord> {
    check_predictor(predictor, prompt, cfg)?;
    let mut z = initial_noise.clone();
    let mut stored_eps = Vec::with_capacity(plan.steps());
    for (_, step, prev_t) in plan.iter() {
        let eps = predictor.predict(&z, prompt, step, cfg.cfg_scale)?;
        z = ddim_step(schedule, &z, &eps, step.timestep, prev_t)?;
        stored_eps.push(eps);
    }
    Ok(ClipRecord {
        initial_noise,
        final_latent: z,
        stored_eps,
        prompt_id: prompt.id.clone(),
        stage_tag,
    })
}

/// First clip: fresh noise from `rng`, no constraints.
pub fn run_first_clip(
    predictor: &mut dyn NoisePredictor,
    prompt: &PromptSpec,
    cfg: &StageConfig,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<ClipRecord> {
    let z_t = LatentClip::sample_standard_normal(rng, predictor.dims())?;
    run_unguided(predictor, prompt, z_t, cfg, plan, schedule, StageTag::First)
}

fn shuffled_noise(prev: &ClipRecord, shuffle: ShuffleKind, cfg: &StageConfig) -> Result<LatentClip> {
    match shuffle {
        ShuffleKind::Extending => extending_shuffle(&prev.initial_noise, cfg.n1),
        ShuffleKind::Internal => internal_shuffle(&prev.initial_noise, cfg.n1, cfg.n2),
    }
}

/// A stage guided by `prev`. `initial_noise` overrides the shuffled noise
/// (used by the ablation); pass `None` for the normal path.
#[allow(clippy::too_many_arguments)]
pub fn run_guided_stage(
    predictor: &mut dyn NoisePredictor,
    prompt: &PromptSpec,
    prev: &ClipRecord,
    shuffle: ShuffleKind,
    stage_tag: StageTag,
    cfg: &StageConfig,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    initial_noise: Option<LatentClip>,
) -> Result<(ClipRecord, RegularizationTrace)> {
    check_predictor(predictor, prompt, cfg)?;
    if prev.stored_eps.len() != plan.steps() {
        return Err(crate::Error::State(format!(
            "previous {} record holds {} stored steps, plan has {}",
            prev.stage_tag.as_str(),
            prev.stored_eps.len(),
            plan.steps()
        )));
    }
    let map = match shuffle {
        ShuffleKind::Extending => GuidanceMap::extending(cfg.n, cfg.n1)?,
        ShuffleKind::Internal => GuidanceMap::internal(cfg.n, cfg.n1, cfg.n2)?,
    };
    let initial_noise = match initial_noise {
        Some(z) => {
            z.require_same_dims(&prev.initial_noise)?;
            z
        }
        None => shuffled_noise(prev, shuffle, cfg)?,
    };
    let delta = cfg.effective_delta();
    let mut trace = RegularizationTrace {
        stage_tag,
        round: 0,
        delta,
        g_before: Vec::with_capacity(plan.steps()),
        g_after: Vec::with_capacity(plan.steps()),
    };
    let mut z = initial_noise.clone();
    let mut stored_eps = Vec::with_capacity(plan.steps());
    for (_, step, prev_t) in plan.iter() {
        let mut eps = predictor.predict(&z, prompt, step, cfg.cfg_scale)?;
        if cfg.regularization_enabled {
            let r = apply_regularization(&eps, prev.eps_at(step)?, delta)?;
            trace.g_before.push(r.g_before);
            trace.g_after.push(r.g_after);
            eps = r.eps;
        }
        eps = apply_noise_replacement(&eps, prev, &map, step, cfg)?;
        z = ddim_step(schedule, &z, &eps, step.timestep, prev_t)?;
        stored_eps.push(eps);
    }
    let record = ClipRecord {
        initial_noise,
        final_latent: z,
        stored_eps,
        prompt_id: prompt.id.clone(),
        stage_tag,
    };
    Ok((record, trace))
}

/// `first.z0 ++ per round (internal.z0[N1..N-N1] ++ extend2.z0)`. The first
/// extending stage of each round only seeds the internal stage.
pub fn assemble_final(records: &[ClipRecord], cfg: &StageConfig) -> Result<LatentClip> {
    let (first, rest) = records
        .split_first()
        .ok_or_else(|| invalid("no clip records to assemble"))?;
    if first.stage_tag != StageTag::First || rest.len() % 3 != 0 {
        return Err(invalid(format!(
            "records must be first, then (extend, internal, extend2) rounds; got {:?}",
            records.iter().map(|r| r.stage_tag.as_str()).collect::<Vec<_>>()
        )));
    }
    let mut parts = vec![first.final_latent.clone()];
    for round in rest.chunks_exact(3) {
        let tags = [round[0].stage_tag, round[1].stage_tag, round[2].stage_tag];
        if tags != [StageTag::Extend, StageTag::Internal, StageTag::Extend2] {
            return Err(invalid(format!("malformed round {tags:?}")));
        }
        if cfg.n > 2 * cfg.n1 {
            let middle = FrameRange::new(cfg.n1, cfg.n - cfg.n1)?;
            parts.push(round[1].final_latent.slice_frames(middle)?);
        }
        parts.push(round[2].final_latent.clone());
    }
    concat_frames(&parts)
}

/// Full run. `prompts[0]` drives the first clip and each later prompt one
/// round of extend, internal and extend2 stages, each guided and regularized
/// by the stage before it.
pub fn run_pipeline(
    predictor: &mut dyn NoisePredictor,
    prompts: &[PromptSpec],
    cfg: &StageConfig,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    let (p1, later) = prompts
        .split_first()
        .ok_or_else(|| invalid("at least one prompt is required"))?;
    cfg.validate(plan.steps(), schedule.train_timesteps())?;
    if let Some(c) = options.corrupt {
        if c.round >= later.len() || c.frame < cfg.n1 || c.frame >= cfg.n {
            return Err(invalid(format!(
                "corruption {c:?} must target a non-guided frame in [{}, {}) of an existing round",
                cfg.n1, cfg.n
            )));
        }
    }
    let np = (cfg.n * predictor.dims().frame_len()) as f64;
    if cfg.regularization_enabled && cfg.delta >= np {
        warn!("delta {} >= N*P = {np}: regularization step does not contract", cfg.delta);
    }
    info!(
        "pipeline: {} prompt(s), N={} N1={} N2={} Td={} delta={} s={} S={}",
        prompts.len(),
        cfg.n,
        cfg.n1,
        cfg.n2,
        cfg.td,
        cfg.effective_delta(),
        cfg.cfg_scale,
        plan.steps()
    );
    let first = run_first_clip(predictor, p1, cfg, plan, schedule, rng)?;
    let mut records = vec![first];
    let mut traces = Vec::new();
    for (round, prompt) in later.iter().enumerate() {
        let prev = records.last().expect("first record");
        let mut z_ext = extending_shuffle(&prev.initial_noise, cfg.n1)?;
        if let Some(c) = options.corrupt.filter(|c| c.round == round) {
            let fresh = LatentClip::sample_standard_normal(rng, z_ext.dims().with_frames(1))?;
            z_ext.frame_mut(c.frame).copy_from_slice(fresh.data());
            debug!("round {round}: corrupted initial-noise frame {}", c.frame);
        }
        let stages = [
            (ShuffleKind::Extending, StageTag::Extend, Some(z_ext)),
            (ShuffleKind::Internal, StageTag::Internal, None),
            (ShuffleKind::Extending, StageTag::Extend2, None),
        ];
        for (shuffle, tag, noise) in stages {
            let prev = records.last().expect("previous record");
            let (record, mut trace) =
                run_guided_stage(predictor, prompt, prev, shuffle, tag, cfg, plan, schedule, noise)?;
            trace.round = round;
            debug!(
                "round {round} {}: final content loss {:?}",
                tag.as_str(),
                trace.g_after.last()
            );
            records.push(record);
            if cfg.regularization_enabled {
                traces.push(trace);
            }
        }
    }
    let final_latent = assemble_final(&records, cfg)?;
    debug_assert_eq!(
        final_latent.n_frames(),
        final_frame_count(cfg.n, cfg.n1, later.len())
    );
    Ok(PipelineOutput {
        final_latent,
        records,
        traces,
    })
}
