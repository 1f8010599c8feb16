//! Experiment configuration: one TOML document with a table per stage, plus
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collab::CollabConfig;
use crate::dataset::DatasetConfig;
use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nets::UNetConfig;
use crate::vae::VaeConfig;

/// Batch size of the reference recipe.
pub const REFERENCE_BATCH: usize = 12;

/// Learning rate of every desk-scale loop. The small networks here train
/// from scratch, where [`crate::tensor::REFERENCE_LR`] barely moves them within 2k steps.
pub const DESK_LR: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub zero_terminal_snr: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            steps: 64,
            zero_terminal_snr: true,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule, self.steps, self.zero_terminal_snr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of training objects used (nested subsets).
    pub data_fraction: f64,
    /// 0 keeps only the first and last checkpoints.
    pub checkpoint_every: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: DESK_LR,
            data_fraction: 1.0,
            checkpoint_every: 500,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}.batch_size must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{what}.lr must be positive")));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("{what}.data_fraction outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Frozen base plus collaborating PBR branch.
    Collab,
    /// The base network retrained to output PBR only.
    Finetune,
    /// The base network retrained to output PBR and RGB.
    FinetuneRgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
    pub mask_projection_steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 8,
            mask_projection_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Frechet,
    Mmd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: MetricKind,
    /// Generated samples compared against the held-out records. Held-out
    /// conditions repeat when this exceeds their count.
    pub samples: usize,
    pub backbone_seed: u64,
    pub backbone_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Frechet,
            samples: 16,
            backbone_seed: 7,
            backbone_width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpConfig {
    /// Number of blend weights from 0 to 1 inclusive.
    pub points: usize,
    /// `noise` or `prompt`.
    pub kind: InterpKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpKind {
    Noise,
    Prompt,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            points: 5,
            kind: InterpKind::Noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of training, sampling and evaluation randomness. The dataset
    /// has its own `data.seed`.
    pub run_seed: u64,
    pub data: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub unet: UNetConfig,
    pub model: ModelKind,
    pub collab: CollabConfig,
    pub pretrain: LoopConfig,
    pub train: LoopConfig,
    pub vae: VaeConfig,
    pub vae_train: LoopConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub interp: InterpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_seed: 0,
            data: DatasetConfig::default(),
            diffusion: DiffusionConfig::default(),
            unet: UNetConfig::default(),
            model: ModelKind::Collab,
            collab: CollabConfig::default(),
            pretrain: LoopConfig::default(),
            train: LoopConfig::default(),
            vae: VaeConfig::default(),
            vae_train: LoopConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            interp: InterpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.collab.validate()?;
        self.vae.validate()?;
        self.pretrain.validate("pretrain")?;
        self.train.validate("train")?;
        self.vae_train.validate("vae_train")?;
        if self.diffusion.steps == 0 {
            return Err(Error::Config("diffusion.steps must be positive".into()));
        }
        if self.sample.mask_projection_steps > self.diffusion.steps {
            return Err(Error::Config(
                "sample.mask_projection_steps exceeds diffusion.steps".into(),
            ));
        }
        let div = (1 << (self.unet.channel_mults.len() - 1)) * self.collab.factor();
        if self.data.resolution % div != 0 {
            return Err(Error::Config(format!(
                "data.resolution {} not divisible by {div}",
                self.data.resolution
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error(e.message()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or defaults when `None`), then applies `overrides` in
    /// order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                // Parse into the typed config first so unknown keys in the file
                // are reported.
                Self::from_toml(&text)?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        let reference: toml::Table = Self::default()
            .to_toml()?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, &reference, o)?;
        }
        let cfg: Self = toml::Table::try_into(table).map_err(|e| config_error(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with `overrides` applied, validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let parse = |c: &Self| -> Result<toml::Table> {
            c.to_toml()?
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
        };
        let mut table = parse(self)?;
        let reference = parse(&Self::default())?;
        for o in overrides {
            apply_override(&mut table, &reference, o)?;
        }
        let cfg: Self = toml::Table::try_into(table).map_err(|e| config_error(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_error(msg: &str) -> Error {
    match msg.strip_prefix("unknown field `") {
        Some(rest) => Error::UnknownKey(rest.split('`').next().unwrap_or(rest).to_string()),
        None => Error::Config(msg.to_string()),
    }
}

/// Dotted paths of every leaf in `t`.
fn leaves(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(sub) => leaves(sub, &path, out),
            _ => out.push(path),
        }
    }
}

/// Resolves `key` to a full dotted path: an exact path, else the unique
/// nested leaf with that name, else a top-level key.
pub fn resolve_key(reference: &toml::Table, key: &str) -> Result<String> {
    let mut all = Vec::new();
    leaves(reference, "", &mut all);
    if all.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let nested: Vec<&String> = all.iter().filter(|p| p.ends_with(&suffix)).collect();
    match nested.len() {
        1 => Ok(nested[0].clone()),
        0 => Err(Error::UnknownKey(key.to_string())),
        _ => Err(Error::Config(format!(
            "key {key} is ambiguous: {}",
            nested.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, reference: &toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path = resolve_key(reference, key.trim())?;
    let mut value = parse_value(raw.trim());
    // Floats written as integers ("lr=1") still land in float fields.
    let mut node = reference;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.get(*p).and_then(|v| v.as_table()).expect("resolved path");
    }
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (node.get(parts[parts.len() - 1]), &value) {
        value = toml::Value::Float(*i as f64);
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::WiringMode;
    use crate::tensor::REFERENCE_LR;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.train.lr, DESK_LR);
        assert_eq!((REFERENCE_LR, REFERENCE_BATCH), (3e-5, 12));
    }

    #[test]
    fn overrides_resolve_short_and_dotted_keys() {
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let cfg = ExperimentConfig::load(
            None,
            &o(&["objects=8", "wiring=one_way", "train.steps=5", "train.lr=1", "seed=3"]),
        )
        .unwrap();
        assert_eq!(cfg.data.objects, 8);
        assert_eq!(cfg.data.seed, 3);
        assert_eq!(cfg.collab.wiring, WiringMode::OneWay);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lr, 1.0);
        assert!(matches!(
            ExperimentConfig::load(None, &o(&["bogus=1"])),
            Err(Error::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::load(None, &o(&["batch_size=1"])),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::load(None, &o(&["wiring=sideways"])).is_err());
    }

    #[test]
    fn unknown_file_keys_are_named() {
        match ExperimentConfig::from_toml("[train]\nstepz = 3\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "stepz"),
            other => panic!("{other:?}"),
        }
    }
}
