//! Run configuration: one JSON document wiring every pipeline stage.
//!
//! Every command reads a [`RunConfig`] (file or defaults), applies command-line
//! overrides, and echoes the config fingerprint into its output artifacts so
//! any result can be traced back to the exact settings that produced it.

use std::path::{Path, PathBuf};

use crate::adapt::{AugmentConfig, DeformParams};
use crate::contact::{ContactConfig, DEFAULT_D_CONTACT};
use crate::error::{Error, Result};
use crate::metrics::ClassifierConfig;
use crate::prior::PriorConfig;
use crate::refiner::GuidanceConfig;
use serde::{Deserialize, Serialize};

/// Output locations for every artifact kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub objects_dir: PathBuf,
    pub prior_dir: PathBuf,
    pub contact_dir: PathBuf,
    pub classifier_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "out/dataset.hoid".into(),
            objects_dir: "out/objects".into(),
            prior_dir: "out/prior".into(),
            contact_dir: "out/contact".into(),
            classifier_dir: "out/classifier".into(),
            reports_dir: "out/reports".into(),
        }
    }
}

impl Paths {
    /// Re-roots every path under `base` (used by tests to isolate runs).
    pub fn under(base: &Path) -> Self {
        Paths {
            dataset: base.join("dataset.hoid"),
            objects_dir: base.join("objects"),
            prior_dir: base.join("prior"),
            contact_dir: base.join("contact"),
            classifier_dir: base.join("classifier"),
            reports_dir: base.join("reports"),
        }
    }
}

/// Training-loop settings for one diffusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTrain {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Loss-curve rows are written every this many steps.
    pub log_every: usize,
}

impl Default for StageTrain {
    fn default() -> Self {
        StageTrain {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            log_every: 25,
        }
    }
}

impl StageTrain {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config(format!(
                "{} training needs positive steps, batch_size and log_every",
                stage
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "{} learning rate must be positive and finite",
                stage
            )));
        }
        Ok(())
    }
}

/// Training settings across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub prior: StageTrain,
    pub contact: StageTrain,
    /// Append one augmented copy of each record when training the
    /// diffusion stages.
    pub augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            prior: StageTrain::default(),
            contact: StageTrain {
                steps: 1200,
                ..StageTrain::default()
            },
            augment: true,
        }
    }
}

/// Metric evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub diversity_pairs: usize,
    pub multimodality_pairs: usize,
    /// Records (from the head of the generated set) entering the IV mean.
    pub iv_samples: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            diversity_pairs: crate::metrics::DEFAULT_DIVERSITY_PAIRS,
            multimodality_pairs: 100,
            iv_samples: 50,
        }
    }
}

/// Ablation toggles; `true` switches the named mechanism *off*, mirroring
/// the w/o rows of the ablation table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Disable the contact-distance guidance term.
    pub fcon: bool,
    /// Disable the normal-alignment guidance term.
    pub fnorm: bool,
    /// Disable geometry deformation in augmentation.
    pub gd: bool,
    /// Disable semantic adjustment in augmentation.
    pub sa: bool,
}

impl AblationFlags {
    /// Parses one repeatable `--ablate` value.
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "fcon" => self.fcon = true,
            "fnorm" => self.fnorm = true,
            "gd" => self.gd = true,
            "sa" => self.sa = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation '{}'; expected fcon, fnorm, gd or sa",
                    other
                )))
            }
        }
        Ok(())
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 1 (the default) is the deterministic reference mode.
    pub threads: usize,
    /// Records produced by `synthgen` unless `--count` overrides.
    pub dataset_count: usize,
    /// Contact labeling threshold (meters).
    pub d_contact: f64,
    pub paths: Paths,
    pub prior: PriorConfig,
    pub contact: ContactConfig,
    pub classifier: ClassifierConfig,
    pub guidance: GuidanceConfig,
    pub deform: DeformParams,
    pub train: TrainSettings,
    pub metrics: MetricSettings,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 1,
            dataset_count: 200,
            d_contact: DEFAULT_D_CONTACT,
            paths: Paths::default(),
            prior: PriorConfig::default(),
            contact: ContactConfig::default(),
            classifier: ClassifierConfig::default(),
            guidance: GuidanceConfig::default(),
            deform: DeformParams::default(),
            train: TrainSettings::default(),
            metrics: MetricSettings::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.dataset_count == 0 {
            return Err(Error::config("dataset_count must be positive"));
        }
        if !(self.d_contact > 0.0) {
            return Err(Error::config("d_contact must be positive"));
        }
        self.classifier.validate()?;
        self.guidance.validate(self.prior.t_count)?;
        self.deform.validate()?;
        self.train.prior.validate("prior")?;
        self.train.contact.validate("contact")?;
        if self.metrics.diversity_pairs == 0 || self.metrics.multimodality_pairs == 0 {
            return Err(Error::config("metric pair counts must be positive"));
        }
        Ok(())
    }

    /// Guidance config with the ablation flags applied.
    pub fn effective_guidance(&self) -> GuidanceConfig {
        let mut g = self.guidance.clone();
        if self.ablation.fcon {
            g.enable_con = false;
        }
        if self.ablation.fnorm {
            g.enable_norm = false;
        }
        g
    }

    /// Augmentation config with the ablation flags applied.
    pub fn effective_augment(&self) -> AugmentConfig {
        AugmentConfig {
            geometry: !self.ablation.gd,
            semantics: !self.ablation.sa,
            deform: self.deform.clone(),
            d_contact: self.d_contact,
        }
    }

    /// Stable fingerprint of the full configuration.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::metrics::fingerprint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        // [TRIVIAL] default config is valid and survives JSON.
        let config = RunConfig::default();
        config.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.fingerprint(), config.fingerprint());
    }

    #[test]
    fn partial_files_fill_defaults() {
        // [TRIVIAL] a sparse JSON document only overrides what it names.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.json");
        std::fs::write(&path, r#"{"seed": 99, "dataset_count": 10}"#).unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.dataset_count, 10);
        assert_eq!(config.threads, 1);
        assert_eq!(config.prior.width, PriorConfig::default().width);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // [TRIVIAL] zero threads and malformed JSON fail with the right
        // error classes.
        let mut config = RunConfig::default();
        config.threads = 0;
        assert!(matches!(config.validate().unwrap_err(), Error::Config(_)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn ablation_flags_map_to_configs() {
        // [DERIVED] the ablation matrix rows produce distinct effective
        // configs: full, w/o GD, w/o SA, and guidance-term drops.
        let mut config = RunConfig::default();
        let full = config.effective_augment();
        assert!(full.geometry && full.semantics);

        config.ablation.set("gd").unwrap();
        let wo_gd = config.effective_augment();
        assert!(!wo_gd.geometry && wo_gd.semantics);

        config.ablation = AblationFlags::default();
        config.ablation.set("sa").unwrap();
        let wo_sa = config.effective_augment();
        assert!(wo_sa.geometry && !wo_sa.semantics);

        config.ablation.set("fcon").unwrap();
        config.ablation.set("fnorm").unwrap();
        let g = config.effective_guidance();
        assert!(!g.enable_con && !g.enable_norm && g.enable_balance);

        assert!(config.ablation.set("nope").is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        // [TRIVIAL] fingerprints differ when any field changes.
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 8;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), RunConfig::default().fingerprint());
    }
}
