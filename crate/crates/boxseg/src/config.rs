//! Run configuration: a TOML file with `--set key=value` overrides.
//!
//! Unknown keys are hard errors, every run directory receives the fully
//! resolved snapshot, and defaults follow the standard recipe: tau_iou 0.5,
//! tau_c 0.05, tau_m 0.5, tau_a 0.5, lambda_pixel 0.5, lambda_affinity 0.1,
//! ema_alpha 0.999, warmup spanning the first ninth of the schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::augment::AugLevel;
use crate::losses::{AffinityForm, PixelLoss};
use crate::model::ModelConfig;
use crate::scoring::ScoreVariant;
use crate::{Error, Result};

/// Training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    BoxOnly,
    #[default]
    Boxteacher,
    SelfTrain,
    OracleFullSup,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::BoxOnly => "box_only",
            TrainMode::Boxteacher => "boxteacher",
            TrainMode::SelfTrain => "self_train",
            TrainMode::OracleFullSup => "oracle_full_sup",
        }
    }
}

/// Loss, assignment, scoring, and EMA knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub pixel_loss: PixelLoss,
    pub affinity_form: AffinityForm,
    pub lambda_pixel: f64,
    pub lambda_affinity: f64,
    /// Weight of the box-supervised mask losses (projection + pairwise).
    pub lambda_box: f64,
    pub tau_a: f64,
    pub tau_m: f64,
    pub tau_iou: f64,
    pub tau_c: f64,
    pub sigma_color: f64,
    pub tau_color: f64,
    pub ema_alpha: f64,
    /// Omit to span the first ninth of the schedule (the 10k-of-90k ratio).
    pub warmup_iters: Option<u64>,
    pub quality_score: ScoreVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pixel_loss: PixelLoss::Dice,
            affinity_form: AffinityForm::LogOfSum,
            lambda_pixel: 0.5,
            lambda_affinity: 0.1,
            lambda_box: 1.0,
            tau_a: 0.5,
            tau_m: 0.5,
            tau_iou: 0.5,
            tau_c: 0.05,
            sigma_color: 2.0,
            tau_color: 0.3,
            ema_alpha: 0.999,
            warmup_iters: None,
            quality_score: ScoreVariant::MaskAware,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub level: AugLevel,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            level: AugLevel::Weak,
            scale_min: 0.8,
            scale_max: 1.0,
            flip_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub iters: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            iters: 1200,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Everything one training/evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: TrainMode,
    /// Dataset root containing `train/` and `eval/` splits.
    pub dataset: PathBuf,
    /// Output directory for the snapshot, metrics, and checkpoint.
    pub out: PathBuf,
    /// Checkpoint of the pseudo labeler (`self_train` mode only).
    #[serde(default)]
    pub labeler: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    /// Warmup length: explicit value, or the schedule's first ninth.
    pub fn warmup_iters(&self) -> u64 {
        self.loss
            .warmup_iters
            .unwrap_or_else(|| (self.schedule.iters as f64 / 9.0).ceil() as u64)
    }

    /// Materialize derived defaults so the snapshot alone reproduces the run.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.loss.warmup_iters = Some(self.warmup_iters());
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
            Ok(())
        };
        unit("loss.tau_a", l.tau_a)?;
        unit("loss.tau_m", l.tau_m)?;
        unit("loss.tau_color", l.tau_color)?;
        if !(l.tau_iou > 0.0 && l.tau_iou <= 1.0) {
            return Err(Error::Config("loss.tau_iou must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&l.tau_c) {
            return Err(Error::Config("loss.tau_c must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&l.ema_alpha) {
            return Err(Error::Config("loss.ema_alpha must lie in [0, 1)".into()));
        }
        if l.lambda_pixel < 0.0 || l.lambda_affinity < 0.0 || l.lambda_box < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if l.sigma_color <= 0.0 {
            return Err(Error::Config("loss.sigma_color must be positive".into()));
        }
        let a = &self.augment;
        if !(a.scale_min > 0.0 && a.scale_max >= a.scale_min) {
            return Err(Error::Config("augment scale range is invalid".into()));
        }
        unit("augment.flip_prob", a.flip_prob)?;
        let s = &self.schedule;
        if s.iters == 0 || s.batch_size == 0 {
            return Err(Error::Config("schedule.iters and batch_size must be positive".into()));
        }
        if s.lr <= 0.0 {
            return Err(Error::Config("schedule.lr must be positive".into()));
        }
        if self.mode == TrainMode::SelfTrain && self.labeler.is_none() {
            return Err(Error::Config(
                "self_train mode requires a labeler checkpoint path".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::load_with_overrides(path, &[])
    }

    /// Load a TOML config and apply dotted-path `key=value` overrides.
    /// Unknown keys fail hard, both in the file and in the overrides.
    pub fn load_with_overrides(path: &Path, sets: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            detail: e.to_string(),
        })?;
        for set in sets {
            apply_override(&mut table, set)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Error::Parse {
            file: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            file: "<inline>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the resolved snapshot into the run directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.snapshot.toml");
        let text = toml::to_string_pretty(&self.resolved())
            .map_err(|e| Error::Config(format!("snapshot serialization failed: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// Stable hash of the resolved config (checkpoint header).
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(&self.resolved()).expect("config serializes");
        fnv1a(json.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

/// Apply one `dotted.path=value` override to a TOML table.
fn apply_override(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw_value) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{set}' is not key=value")))?;
    let value: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        // bare words (mode names, paths) fall back to strings
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' is empty")));
    }
    let mut current = table;
    for k in &keys[..keys.len() - 1] {
        current = current
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
