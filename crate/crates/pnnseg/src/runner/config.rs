//! Experiment configuration: model, phase, seeds, data locations and
//! training hyperparameters. A JSON file supplies defaults; command-line
//! flags override it.

use crate::ensemble::PnnConfig;
use crate::error::{Error, Result};
use crate::nets::{DenseAEConfig, UNetConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Deep,
    Wide,
    EnsembleTransfer,
    EnsembleRetrain,
    Pnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Deep,
        ModelKind::Wide,
        ModelKind::EnsembleTransfer,
        ModelKind::EnsembleRetrain,
        ModelKind::Pnn,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Deep => "deep",
            ModelKind::Wide => "wide",
            ModelKind::EnsembleTransfer => "ensemble-transfer",
            ModelKind::EnsembleRetrain => "ensemble-retrain",
            ModelKind::Pnn => "pnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(ModelKind::Deep),
            "wide" => Ok(ModelKind::Wide),
            "ensemble-transfer" | "transfer" => Ok(ModelKind::EnsembleTransfer),
            "ensemble-retrain" | "retrain" => Ok(ModelKind::EnsembleRetrain),
            "pnn" => Ok(ModelKind::Pnn),
            other => Err(Error::Config(format!(
                "unknown model {other}; expected deep, wide, ensemble-transfer, ensemble-retrain or pnn"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    NoAug,
    Aug,
}

impl Phase {
    pub fn tag(&self) -> &'static str {
        match self {
            Phase::NoAug => "noaug",
            Phase::Aug => "aug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noaug" => Ok(Phase::NoAug),
            "aug" => Ok(Phase::Aug),
            other => Err(Error::Config(format!("unknown phase {other}; expected noaug or aug"))),
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub phase: Phase,
    pub experiments: Vec<u32>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Divides every filter budget; 1 reproduces the full-size networks.
    pub scale: usize,
    pub recon_weight: f64,
    pub ae_in_vote: bool,
    pub exclude_empty_slices: bool,
    pub dice_loss: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            return Err(Error::Config("at least one experiment number is required".into()));
        }
        for &k in &self.experiments {
            if !(1..=59).contains(&k) {
                return Err(Error::Config(format!("experiment number {k} out of range 1..=59")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.scale == 0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.recon_weight < 0.0 {
            return Err(Error::Config("reconstruction weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn deep_arch(&self) -> UNetConfig {
        UNetConfig::deep().scaled(self.scale)
    }

    pub fn wide_arch(&self) -> UNetConfig {
        UNetConfig::wide().scaled(self.scale)
    }

    pub fn ae_arch(&self) -> DenseAEConfig {
        DenseAEConfig::brain().scaled(self.scale)
    }

    pub fn pnn_arch(&self) -> PnnConfig {
        let mut cfg = PnnConfig::new(self.ae_arch(), self.deep_arch(), self.wide_arch());
        cfg.recon_weight = self.recon_weight;
        cfg.ae_in_vote = self.ae_in_vote;
        cfg
    }
}

/// Partial configuration: every field optional, as read from a JSON file
/// or assembled from command-line flags. Flat keys mirror the flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub model: Option<String>,
    pub phase: Option<String>,
    pub experiments: Option<Vec<u32>>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub scale: Option<usize>,
    pub recon_weight: Option<f64>,
    pub ae_in_vote: Option<bool>,
    pub exclude_empty_slices: Option<bool>,
    pub dice_loss: Option<bool>,
}

impl ConfigPatch {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Overlay `self` (higher priority) on `base`.
    pub fn over(self, base: ConfigPatch) -> ConfigPatch {
        ConfigPatch {
            model: self.model.or(base.model),
            phase: self.phase.or(base.phase),
            experiments: self.experiments.or(base.experiments),
            data: self.data.or(base.data),
            out: self.out.or(base.out),
            epochs: self.epochs.or(base.epochs),
            batch: self.batch.or(base.batch),
            lr: self.lr.or(base.lr),
            scale: self.scale.or(base.scale),
            recon_weight: self.recon_weight.or(base.recon_weight),
            ae_in_vote: self.ae_in_vote.or(base.ae_in_vote),
            exclude_empty_slices: self.exclude_empty_slices.or(base.exclude_empty_slices),
            dice_loss: self.dice_loss.or(base.dice_loss),
        }
    }

    /// Fill defaults and produce the final config. `model`, `phase`,
    /// `data` and `out` have no defaults.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let model = ModelKind::parse(
            &self.model.ok_or_else(|| Error::Config("missing model (--model)".into()))?,
        )?;
        let phase = Phase::parse(
            &self.phase.ok_or_else(|| Error::Config("missing phase (--phase)".into()))?,
        )?;
        let cfg = ExperimentConfig {
            model,
            phase,
            experiments: self.experiments.unwrap_or_else(|| (1..=5).collect()),
            data_dir: self.data.ok_or_else(|| Error::Config("missing data directory (--data)".into()))?,
            out_dir: self.out.ok_or_else(|| Error::Config("missing output directory (--out)".into()))?,
            epochs: self.epochs.unwrap_or(20),
            batch_size: self.batch.unwrap_or(8),
            lr: self.lr.unwrap_or(1e-3),
            scale: self.scale.unwrap_or(8),
            recon_weight: self.recon_weight.unwrap_or(0.1),
            ae_in_vote: self.ae_in_vote.unwrap_or(false),
            exclude_empty_slices: self.exclude_empty_slices.unwrap_or(false),
            dice_loss: self.dice_loss.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_cli() -> ConfigPatch {
        ConfigPatch {
            model: Some("deep".into()),
            phase: Some("noaug".into()),
            data: Some("/tmp/cache".into()),
            out: Some("/tmp/out".into()),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = minimal_cli().resolve().unwrap();
        assert_eq!(cfg.experiments, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.scale, 8);
        assert!(!cfg.dice_loss);
    }

    #[test]
    fn cli_overrides_file() {
        let file = ConfigPatch {
            model: Some("wide".into()),
            epochs: Some(3),
            lr: Some(0.5),
            ..Default::default()
        };
        let cli = ConfigPatch {
            lr: Some(0.25),
            ..minimal_cli()
        };
        let cfg = cli.over(file).resolve().unwrap();
        assert_eq!(cfg.model, ModelKind::Deep); // CLI wins
        assert_eq!(cfg.epochs, 3); // file fills the gap
        assert_eq!(cfg.lr, 0.25); // CLI wins
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model": "pnn", "phase": "aug", "batch": 2}"#).unwrap();
        let patch = ConfigPatch::from_file(&path).unwrap();
        assert_eq!(patch.model.as_deref(), Some("pnn"));
        assert_eq!(patch.batch, Some(2));
        // Unknown keys are configuration mistakes.
        std::fs::write(&path, r#"{"modle": "pnn"}"#).unwrap();
        assert!(ConfigPatch::from_file(&path).is_err());
    }

    #[test]
    fn scaled_architectures() {
        let mut patch = minimal_cli();
        patch.scale = Some(8);
        let cfg = patch.resolve().unwrap();
        assert_eq!(cfg.deep_arch().init_filters, 8);
        assert_eq!(cfg.wide_arch().init_filters, 32);
        assert_eq!(cfg.ae_arch().stage_growths, vec![4, 8]);
        assert_eq!(cfg.ae_arch().bottleneck_growth, 16);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut patch = minimal_cli();
        patch.experiments = Some(vec![0]);
        assert!(patch.clone().resolve().is_err());
        patch.experiments = Some(vec![1]);
        patch.lr = Some(-1.0);
        assert!(patch.resolve().is_err());
    }

    #[test]
    fn model_and_phase_tags_roundtrip() {
        for m in ModelKind::ALL {
            assert_eq!(ModelKind::parse(m.tag()).unwrap(), m);
        }
        for p in [Phase::NoAug, Phase::Aug] {
            assert_eq!(Phase::parse(p.tag()).unwrap(), p);
        }
    }
}
