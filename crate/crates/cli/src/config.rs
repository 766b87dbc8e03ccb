//! Pipeline configuration: one strict JSON document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soh_core::estimators::DEFAULT_BACKBONE_THRESHOLD;
use soh_core::psr::{FNN_FRACTION_CUTOFF, FNN_RATIO_THRESHOLD};
use soh_core::transfer::{CompensationConfig, DEFAULT_ALPHA, DEFAULT_T};
use soh_core::TrainConfig;

use crate::error::{invalid, io_err, Result};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub telemetry: PathBuf,
    /// Capacity labels; required for stages that are trained or compensated.
    pub labels: Option<PathBuf>,
    pub stage_table: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

/// A fixed positive integer or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(usize),
    Auto(Auto),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSettings {
    pub tau: Param,
    pub r: Param,
    /// Search limits used when a parameter is `"auto"`.
    pub max_lag: usize,
    pub max_r: usize,
    pub fnn_threshold: f64,
    pub fnn_cutoff: f64,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            tau: Param::Fixed(3),
            r: Param::Fixed(3),
            max_lag: 20,
            max_r: 6,
            fnn_threshold: FNN_RATIO_THRESHOLD,
            fnn_cutoff: FNN_FRACTION_CUTOFF,
        }
    }
}

/// A fixed consistency dimension, or candidates to sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimSetting {
    Fixed(usize),
    Sweep(Vec<usize>),
}

impl Default for DimSetting {
    fn default() -> Self {
        DimSetting::Fixed(4)
    }
}

/// CDL optimizer options; the restart seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdlSettings {
    pub n_restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub allow_ridge: bool,
}

impl Default for CdlSettings {
    fn default() -> Self {
        let d = soh_core::cdl::CdlOptions::default();
        Self {
            n_restarts: d.n_restarts,
            max_iters: d.max_iters,
            grad_tol: d.grad_tol,
            allow_ridge: d.allow_ridge,
        }
    }
}

/// Which target cycles the transfer RMSE is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// Every cycle after the first `T`.
    #[default]
    Remaining,
    /// The same chronological test split the source fit uses.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSettings {
    pub alpha: f64,
    pub t: usize,
    pub compensation: CompensationConfig,
    pub evaluation: Evaluation,
    pub targets: Vec<String>,
    /// Target telemetry, when it is not in the source files.
    pub data: Option<DataPaths>,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            t: DEFAULT_T,
            compensation: CompensationConfig::default(),
            evaluation: Evaluation::Remaining,
            targets: Vec::new(),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub data: DataPaths,
    pub source_battery: String,
    pub rated_capacity_ah: f64,
    pub samples_per_cycle: usize,
    pub embedding: EmbeddingSettings,
    #[serde(rename = "S")]
    pub consistency_dim: DimSetting,
    pub train_fraction: f64,
    /// Per-stage training-cycle counts that replace the fraction.
    pub train_cycles: BTreeMap<u32, usize>,
    pub backbone_threshold: usize,
    pub cdl: CdlSettings,
    /// Estimator settings for every stage; the seed comes from the run seed.
    pub training: TrainConfig,
    pub stage_training: BTreeMap<u32, TrainConfig>,
    pub transfer: TransferSettings,
    pub seed: u64,
    /// Seeds of a multi-seed run; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            data: DataPaths::default(),
            source_battery: String::new(),
            rated_capacity_ah: 2.0,
            samples_per_cycle: soh_core::dataio::DEFAULT_SAMPLES_PER_CYCLE,
            embedding: EmbeddingSettings::default(),
            consistency_dim: DimSetting::default(),
            train_fraction: 0.7,
            train_cycles: BTreeMap::new(),
            backbone_threshold: DEFAULT_BACKBONE_THRESHOLD,
            cdl: CdlSettings::default(),
            training: TrainConfig::default(),
            stage_training: BTreeMap::new(),
            transfer: TransferSettings::default(),
            seed: 0,
            seeds: Vec::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a config file. Relative paths are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA {
            return Err(invalid(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        let fix_data = |d: &mut DataPaths| {
            fix(&mut d.telemetry);
            fix(&mut d.stage_table);
            if let Some(l) = d.labels.as_mut() {
                fix(l);
            }
        };
        fix_data(&mut self.data);
        if let Some(d) = self.transfer.data.as_mut() {
            fix_data(d);
        }
        fix(&mut self.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_battery.is_empty() {
            return Err(invalid("source_battery must be set"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if !(self.rated_capacity_ah > 0.0) {
            return Err(invalid("rated_capacity_ah must be positive"));
        }
        if !(self.transfer.alpha > 0.0 && self.transfer.alpha < 1.0) {
            return Err(invalid("transfer.alpha must lie in (0, 1)"));
        }
        if self.transfer.t == 0 {
            return Err(invalid("transfer.t must be at least 1"));
        }
        if self.samples_per_cycle < 2 {
            return Err(invalid("samples_per_cycle must be at least 2"));
        }
        for p in [&self.embedding.tau, &self.embedding.r] {
            if *p == Param::Fixed(0) {
                return Err(invalid("embedding tau and r must be >= 1"));
            }
        }
        match &self.consistency_dim {
            DimSetting::Fixed(0) => return Err(invalid("S must be at least 1")),
            DimSetting::Sweep(c) if c.len() < 2 || c.contains(&0) => {
                return Err(invalid("an S sweep needs at least two positive candidates"))
            }
            _ => {}
        }
        self.training.validate()?;
        for t in self.stage_training.values() {
            t.validate()?;
        }
        let mut data = vec![("data", &self.data)];
        if let Some(d) = &self.transfer.data {
            data.push(("transfer.data", d));
        }
        for (name, d) in data {
            let mut paths = vec![("telemetry", &d.telemetry), ("stage_table", &d.stage_table)];
            if let Some(l) = &d.labels {
                paths.push(("labels", l));
            }
            for (field, p) in paths {
                if p.as_os_str().is_empty() {
                    return Err(invalid(format!("{name}.{field} must be set")));
                }
                if !p.exists() {
                    return Err(invalid(format!(
                        "{name}.{field}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn training_for(&self, stage: u32) -> &TrainConfig {
        self.stage_training.get(&stage).unwrap_or(&self.training)
    }

    pub fn target_data(&self) -> &DataPaths {
        self.transfer.data.as_ref().unwrap_or(&self.data)
    }

    /// Seeds to run: the explicit list, else the single seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&body))
    }
}

/// Seed of one randomized step, mixed from the run seed, stage and purpose.
pub fn derive_seed(run_seed: u64, stage: u32, purpose: u64) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stage as u64) << 20)
        .wrapping_add(purpose)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"schema_version": 1, "source_battery": "B7",
            "data": {"telemetry": "t.csv", "stage_table": "s.csv"}}"#
            .to_string()
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = PipelineConfig::from_json(&minimal()).unwrap();
        assert_eq!(cfg.train_fraction, 0.7);
        assert_eq!(cfg.backbone_threshold, 50);
        assert_eq!(cfg.transfer.t, 10);
        assert_eq!(cfg.transfer.alpha, 0.05);
        assert_eq!(cfg.consistency_dim, DimSetting::Fixed(4));
        assert_eq!(cfg.run_seeds(), vec![0]);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let typo = minimal().replace(
            "\"source_battery\"",
            "\"learning_rat\": 1, \"source_battery\"",
        );
        let err = PipelineConfig::from_json(&typo).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
        let nested = minimal().replace(
            "\"schema_version\": 1,",
            "\"schema_version\": 1, \"training\": {\"epoch\": 3},",
        );
        assert!(PipelineConfig::from_json(&nested).is_err());
        let v2 = minimal().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(PipelineConfig::from_json(&v2)
            .unwrap_err()
            .to_string()
            .contains("schema_version"));
    }

    #[test]
    fn auto_and_sweep_settings_parse() {
        let text = minimal().replace(
            "\"schema_version\": 1,",
            "\"schema_version\": 1, \"embedding\": {\"tau\": \"auto\", \"r\": 4}, \"S\": [2, 3, 4],",
        );
        let cfg = PipelineConfig::from_json(&text).unwrap();
        assert_eq!(cfg.embedding.tau, Param::Auto(Auto::Auto));
        assert_eq!(cfg.embedding.r, Param::Fixed(4));
        assert_eq!(cfg.consistency_dim, DimSetting::Sweep(vec![2, 3, 4]));
        let back = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_values_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.csv"), "").unwrap();
        std::fs::write(dir.path().join("s.csv"), "").unwrap();
        let mut cfg = PipelineConfig::from_json(&minimal()).unwrap();
        cfg.resolve_paths(dir.path());
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.train_fraction = 1.0;
        assert!(bad.validate().is_err());
        let mut missing = cfg.clone();
        missing.data.labels = Some(dir.path().join("labels.csv"));
        assert!(missing
            .validate()
            .unwrap_err()
            .to_string()
            .contains("labels"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::from_json(&minimal()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
