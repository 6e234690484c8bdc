//! Run configuration. JSON keys mirror the engine's knobs; every key except
//! `prompts` has a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{AnalyticPredictor, BridgeTarget};
use crate::engine::{StageConfig, TdUnits};
use crate::error::{path_err, Error, Result};
use crate::latent::Dims;
use crate::schedule::{BetaKind, NoiseSchedule, SamplerPlan};
use crate::world::{PromptLibrary, PromptSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Analytic,
    Bridge,
}

/// A prompt library given as a path (relative to the config file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LibrarySource {
    Path(PathBuf),
    Inline(BTreeMap<String, Vec<f64>>),
}

fn d_seed() -> u64 { 0 }
fn d_n() -> usize { 16 }
fn d_n1() -> usize { 6 }
fn d_n2() -> usize { 8 }
fn d_td() -> usize { 10 }
fn d_delta() -> f64 { 140.0 }
fn d_steps() -> usize { 50 }
fn d_cfg() -> f64 { 1.5 }
fn d_true() -> bool { true }
fn d_shape() -> [usize; 3] { [2, 16, 16] }
fn d_t() -> usize { 1000 }
fn d_beta_start() -> f64 { 0.00085 }
fn d_beta_end() -> f64 { 0.012 }
fn d_kind() -> BetaKind { BetaKind::ScaledLinear }
fn d_sigma0() -> f64 { AnalyticPredictor::DEFAULT_SIGMA0 }
fn d_sigma_u() -> f64 { AnalyticPredictor::DEFAULT_SIGMA_UNCOND }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub prompts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_library: Option<LibrarySource>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(rename = "N", default = "d_n")]
    pub n: usize,
    #[serde(rename = "N1", default = "d_n1")]
    pub n1: usize,
    #[serde(rename = "N2", default = "d_n2")]
    pub n2: usize,
    #[serde(rename = "Td", default = "d_td")]
    pub td: usize,
    #[serde(default)]
    pub td_units: TdUnits,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(rename = "S", default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_cfg")]
    pub cfg_scale: f64,
    #[serde(default = "d_true")]
    pub regularization: bool,
    /// Channels, height, width of one latent frame.
    #[serde(default = "d_shape")]
    pub frame_shape: [usize; 3],
    #[serde(rename = "T", default = "d_t")]
    pub train_timesteps: usize,
    #[serde(default = "d_beta_start")]
    pub beta_start: f64,
    #[serde(default = "d_beta_end")]
    pub beta_end: f64,
    #[serde(default = "d_kind")]
    pub beta_schedule: BetaKind,
    #[serde(default = "d_sigma0")]
    pub sigma0: f64,
    #[serde(default = "d_sigma_u")]
    pub sigma_uncond: f64,
    #[serde(default)]
    pub predictor: PredictorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge_cmd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// A config with all defaults for the given prompt ids.
    pub fn with_prompts(prompts: &[&str]) -> Self {
        let json = serde_json::json!({ "prompts": prompts });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            // unknown and missing fields surface at the parent path
            let key = match msg.split('`').nth(1) {
                Some(field) if msg.starts_with("unknown field") || msg.starts_with("missing field") => {
                    field.to_string()
                }
                _ if key == "." => "config".to_string(),
                _ => key,
            };
            cfg_err(&key, msg)
        })?;
        Ok(cfg)
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            n: self.n,
            n1: self.n1,
            n2: self.n2,
            td: self.td,
            td_units: self.td_units,
            delta: self.delta,
            cfg_scale: self.cfg_scale,
            regularization_enabled: self.regularization,
        }
    }

    pub fn dims(&self) -> Result<Dims> {
        let [c, h, w] = self.frame_shape;
        Dims::new(self.n, c, h, w).map_err(|e| cfg_err("frame_shape", e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.train_timesteps, self.beta_start, self.beta_end, self.beta_schedule)
            .map_err(|e| {
                let key = if self.train_timesteps == 0 { "T" } else { "beta_start" };
                cfg_err(key, e.to_string())
            })
    }

    pub fn plan(&self, schedule: &NoiseSchedule) -> Result<SamplerPlan> {
        SamplerPlan::new(schedule, self.steps).map_err(|e| cfg_err("S", e.to_string()))
    }

    pub fn bridge_target(&self) -> Result<Option<BridgeTarget>> {
        match (self.predictor, &self.bridge_cmd) {
            (PredictorKind::Analytic, _) => Ok(None),
            (PredictorKind::Bridge, None) => {
                Err(cfg_err("bridge_cmd", "required when predictor is \"bridge\""))
            }
            (PredictorKind::Bridge, Some(cmd)) => BridgeTarget::parse(cmd)
                .map(Some)
                .map_err(|e| cfg_err("bridge_cmd", e.to_string())),
        }
    }

    /// Library resolution: inline entries, a path relative to `base`, or the
    /// built-in library.
    pub fn library(&self, base: Option<&Path>) -> Result<PromptLibrary> {
        match &self.prompt_library {
            None => Ok(PromptLibrary::builtin()),
            Some(LibrarySource::Inline(entries)) => PromptLibrary::from_entries(entries.clone())
                .map_err(|e| cfg_err("prompt_library", e.to_string())),
            Some(LibrarySource::Path(p)) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                PromptLibrary::load(&path).map_err(|e| cfg_err("prompt_library", e.to_string()))
            }
        }
    }

    pub fn prompt_specs(&self, library: &PromptLibrary) -> Result<Vec<PromptSpec>> {
        self.prompts
            .iter()
            .map(|id| library.get(id).map_err(|e| cfg_err("prompts", e.to_string())))
            .collect()
    }

    /// Checks every precondition; `base` resolves a relative library path.
    pub fn validate(&self, base: Option<&Path>) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(cfg_err("prompts", "at least one prompt id is required"));
        }
        let lib = self.library(base)?;
        let specs = self.prompt_specs(&lib)?;
        let emb_len = specs[0].embedding.len();
        if specs.iter().any(|s| s.embedding.len() != emb_len) {
            return Err(cfg_err("prompts", "embedding lengths differ"));
        }
        self.dims()?;
        let schedule = self.schedule()?;
        let plan = self.plan(&schedule)?;
        self.stage_config().validate(plan.steps(), schedule.train_timesteps())?;
        for (key, v) in [("sigma0", self.sigma0), ("sigma_uncond", self.sigma_uncond)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err(key, format!("must be > 0, got {v}")));
            }
        }
        self.bridge_target()?;
        Ok(())
    }

    /// The same config with its prompt library inlined, so it no longer
    /// depends on any other file.
    pub fn resolved(&self, base: Option<&Path>) -> Result<Self> {
        let lib = self.library(base)?;
        let mut used = BTreeMap::new();
        for id in &self.prompts {
            used.insert(id.clone(), lib.get(id)?.embedding);
        }
        Ok(Self {
            prompt_library: Some(LibrarySource::Inline(used)),
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact, fixed field order) serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Reads a config file, or the `config` member of a run manifest.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| path_err(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
    let cfg = match value.get("manifest_version").and(value.get("config")) {
        Some(inner) => RunConfig::parse(&inner.to_string())?,
        None => RunConfig::parse(&text)?,
    };
    cfg.validate(path.parent())?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_json()).map_err(|e| path_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(r#"{"prompts":["a"]}"#).unwrap();
        assert_eq!((c.n, c.n1, c.n2, c.td, c.steps), (16, 6, 8, 10, 50));
        assert_eq!(c.delta, 140.0);
        assert_eq!(c.frame_shape, [2, 16, 16]);
        c.validate(None).unwrap();
        assert_eq!(c, RunConfig::with_prompts(&["a"]));
    }

    #[test]
    fn errors_name_the_key() {
        let bad = |s: &str| {
            let c = RunConfig::parse(s)?;
            c.validate(None)?;
            Ok(c)
        };
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"N1":16}"#)), "N1");
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"N2":20}"#)), "N2");
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"S":0}"#)), "S");
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"bogus":1}"#)), "bogus");
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"delta":"x"}"#)), "delta");
        assert_eq!(key_of(bad(r#"{"prompts":["zz"]}"#)), "prompts");
        assert_eq!(key_of(bad(r#"{"prompts":[]}"#)), "prompts");
        assert_eq!(key_of(bad(r#"{"prompts":["a"],"predictor":"bridge"}"#)), "bridge_cmd");
        assert_eq!(key_of(bad(r#"{"N":4}"#)), "prompts");
    }

    #[test]
    fn save_load_hash_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::with_prompts(&["a", "b"]);
        c.seed = 7;
        let path = dir.path().join("c.json");
        save_config(&c, &path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back.hash(), c.hash());
        c.seed = 8;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn library_sources() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("lib.json"), r#"{"x":[1,1,1,1,0,0,1,0]}"#).unwrap();
        let c = RunConfig::parse(r#"{"prompts":["x"],"prompt_library":"lib.json"}"#).unwrap();
        c.validate(Some(dir.path())).unwrap();
        let r = c.resolved(Some(dir.path())).unwrap();
        r.validate(None).unwrap();
        assert!(matches!(r.prompt_library, Some(LibrarySource::Inline(_))));
    }
}
