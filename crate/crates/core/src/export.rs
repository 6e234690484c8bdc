//! Frame export and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::denoiser::{AnalyticPredictor, BridgeSession, NoisePredictor};
use crate::engine::{run_pipeline, ClipRecord, PipelineOptions, RegularizationTrace, StageTag};
use crate::error::{path_err, Result};
use crate::eval::{adjacent_cosine, content_drift, DriftReport};
use crate::latent::{concat_frames, LatentClip, SeededRng};
use crate::latfile;
use crate::world::Codec;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub dims: [usize; 4],
    pub min: f32,
    pub max: f32,
    pub files: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| path_err(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| path_err(path, e))
}

/// 8-bit gray levels under a global min-max map; a constant clip maps to 128.
pub fn to_gray(value: f32, min: f32, max: f32) -> u8 {
    if max <= min {
        return 128;
    }
    let x = (value as f64 - min as f64) / (max as f64 - min as f64);
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

fn pgm(width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Writes one binary PGM per frame and channel, a `frames.json` sidecar with
/// the normalization range, and `latent.lat`. Returns every file written.
pub fn export_frames(clip: &LatentClip, dir: &Path, codec: Codec) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let x = codec.decode(clip);
    let dims = x.dims();
    let (min, max) = x
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = dims.frames.saturating_sub(1).to_string().len().max(4);
    let plane = dims.height * dims.width;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for (n, frame) in x.frames().enumerate() {
        for c in 0..dims.channels {
            let name = format!("frame_{n:0width$}_c{c}.pgm");
            let path = dir.join(&name);
            let px = frame[c * plane..(c + 1) * plane].iter().map(|&v| to_gray(v, min, max));
            write_file(&path, &pgm(dims.width, dims.height, px))?;
            written.push(path);
            names.push(name);
        }
    }
    let sidecar = FrameSidecar {
        dims: dims.to_array(),
        min,
        max,
        files: names,
    };
    let path = dir.join("frames.json");
    write_file(&path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    written.push(path);
    let path = dir.join("latent.lat");
    latfile::write(&path, clip)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub stage_tag: StageTag,
    pub prompt_id: String,
    pub initial_noise: String,
    pub final_latent: String,
    /// All stored noise predictions stacked along the frame axis in sampler
    /// order (`S·N` frames).
    pub stored_eps: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub engine_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub final_latent: String,
    pub final_sha256: String,
    pub final_frames: usize,
    pub records: Vec<RecordFiles>,
    pub traces: Vec<RegularizationTrace>,
    pub drift: Option<DriftReport>,
    pub timings_ms: BTreeMap<String, u128>,
}

fn write_records(dir: &Path, records: &[ClipRecord]) -> Result<Vec<RecordFiles>> {
    let rec_dir = dir.join("records");
    create_dir(&rec_dir)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let stem = format!("{i:02}_{}", r.stage_tag.as_str());
            let rel = |kind: &str| format!("records/{stem}_{kind}.lat");
            let files = RecordFiles {
                stage_tag: r.stage_tag,
                prompt_id: r.prompt_id.clone(),
                initial_noise: rel("noise"),
                final_latent: rel("z0"),
                stored_eps: rel("eps"),
            };
            latfile::write(&dir.join(&files.initial_noise), &r.initial_noise)?;
            latfile::write(&dir.join(&files.final_latent), &r.final_latent)?;
            latfile::write(&dir.join(&files.stored_eps), &concat_frames(&r.stored_eps)?)?;
            Ok(files)
        })
        .collect()
}

/// Instantiates the configured predictor.
pub fn build_predictor(cfg: &RunConfig) -> Result<Box<dyn NoisePredictor>> {
    let dims = cfg.dims()?;
    match cfg.bridge_target()? {
        None => Ok(Box::new(AnalyticPredictor::new(
            cfg.schedule()?,
            dims,
            cfg.sigma0,
            cfg.sigma_uncond,
        )?)),
        Some(target) => Ok(Box::new(BridgeSession::open(&target, dims)?)),
    }
}

/// Runs the pipeline for `cfg`, exports frames and records under `out`, and
/// writes `manifest.json`. `base` resolves a relative prompt-library path.
pub fn generate(
    cfg: &RunConfig,
    base: Option<&Path>,
    out: &Path,
    predictor: &mut dyn NoisePredictor,
) -> Result<RunManifest> {
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    cfg.validate(base)?;
    let cfg = cfg.resolved(base)?;
    let library = cfg.library(None)?;
    let prompts = cfg.prompt_specs(&library)?;
    let schedule = cfg.schedule()?;
    let plan = cfg.plan(&schedule)?;
    let stage = cfg.stage_config();
    let mut rng = SeededRng::new(cfg.seed);
    let output = run_pipeline(
        predictor,
        &prompts,
        &stage,
        &plan,
        &schedule,
        &mut rng,
        &PipelineOptions::default(),
    )?;
    timings.insert("pipeline".into(), t0.elapsed().as_millis());

    let t1 = Instant::now();
    create_dir(out)?;
    let frame_files = export_frames(&output.final_latent, &out.join("frames"), Codec::Identity)?;
    let records = write_records(out, &output.records)?;
    let drift = if output.records.len() >= 2 {
        let mut d = content_drift(&output.records, Codec::Identity)?;
        d.adjacent_cosines = adjacent_cosine(&output.final_latent)?;
        Some(d)
    } else {
        None
    };
    timings.insert("export".into(), t1.elapsed().as_millis());

    let bytes = latfile::encode(&output.final_latent);
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        engine_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        config: cfg,
        final_latent: "frames/latent.lat".into(),
        final_sha256: hex::encode(Sha256::digest(&bytes)),
        final_frames: output.final_latent.n_frames(),
        records,
        traces: output.traces,
        drift,
        timings_ms: timings,
    };
    let path = out.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    info!(
        "wrote {} frame files and manifest to {}",
        frame_files.len(),
        out.display()
    );
    Ok(manifest)
}
