use std::path::{Path, PathBuf};

use gcpnet::eval::NoiseLevel;
use gcpnet::model::ModelConfig;
use gcpnet::rawproc::IspParams;
use gcpnet::train::TrainConfig;
use gcpnet::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ENV: &str = "GCPNET_DATA";

/// Everything a command needs, loaded from TOML. Unknown keys are errors.
///
/// The seed lives in `train.seed` and drives synthesis and evaluation as
/// well; `train.frames` always follows `model.frames`, and the loss ISP
/// always follows `isp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Directory of PNG clips; procedural clips are used when unset.
    pub data_root: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub isp: IspParams,
    pub data: DataSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data_root: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            isp: IspParams::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Procedural stand-ins used when no data root is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// RGB side of rendered training clips.
    pub train_frame_size: usize,
    pub eval_clips: usize,
    pub eval_clip_frames: usize,
    pub eval_frame_size: usize,
    /// Images rendered for the channel SNR study.
    pub snr_images: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_frame_size: 160,
            eval_clips: 4,
            eval_clip_frames: 7,
            eval_frame_size: 128,
            snr_images: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub noise_levels: Vec<NoiseLevel>,
    /// Packed tile side for inference; 0 runs whole frames.
    pub tile: usize,
    pub overlap: usize,
    /// Also report bilinear demosaicking of the noisy reference.
    pub baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            noise_levels: NoiseLevel::ALL.to_vec(),
            tile: 0,
            overlap: 16,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub bursts: usize,
    /// Packed side of each burst.
    pub patch_size: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { bursts: 8, patch_size: 64 }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies `key.path=value` overrides,
    /// then the data-root environment override.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let t = text
                    .parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?;
                if !t.contains_key("schema_version") {
                    return Err(Error::Config(format!(
                        "{}: schema_version = {SCHEMA_VERSION} is required",
                        p.display()
                    )));
                }
                t
            }
            None => toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?,
        };
        for s in sets {
            apply_override(&mut doc, s)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                cfg.schema_version
            )));
        }
        if cfg.train.loss.isp != IspParams::default() && cfg.train.loss.isp != cfg.isp {
            return Err(Error::Config("set the ISP under [isp], not [train.loss.isp]".into()));
        }
        if let Ok(root) = std::env::var(DATA_ENV) {
            if !root.is_empty() {
                cfg.data_root = Some(PathBuf::from(root));
            }
        }
        cfg.sync();
        Ok(cfg)
    }

    /// Re-establishes the shared fields after overrides.
    pub fn sync(&mut self) {
        self.train.frames = self.model.frames;
        self.train.loss.isp = self.isp.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.noise_levels.is_empty() {
            return Err(Error::Config("eval.noise_levels is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a bare
/// string, so `--set data_root=/x` and `--set train.lr0=1e-4` both work.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
