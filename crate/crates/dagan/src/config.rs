//! Experiment configuration: a TOML file with strict field validation,
//! dotted-path overrides for scripted ablations, two built-in profiles
//! (a minutes-scale desk profile and the published full-scale recipe), and a
//! canonical serialization whose digest fingerprints checkpoints.

use crate::backbone::StagePlan;
use crate::error::{Error, Result};
use crate::generator::{DecoderMode, Normalization, Variant};
use crate::attention::MafmPool;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::str::FromStr;

/// Named architecture sizes selectable from config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanChoice {
    /// Degenerate widths for gradient checks.
    Micro,
    /// Thin plain-convolution trunk for minutes-scale CPU runs.
    Tiny,
    /// The published 50-layer bottleneck trunk.
    Resnet50,
}

impl PlanChoice {
    pub fn plan(&self) -> StagePlan {
        match self {
            PlanChoice::Micro => StagePlan::micro(),
            PlanChoice::Tiny => StagePlan::tiny(),
            PlanChoice::Resnet50 => StagePlan::resnet50(),
        }
    }
}

/// Input standardization selectable from config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationChoice {
    /// Leave inputs in [0,1]; right for synthetic data.
    Identity,
    /// Mean/std of the trunk's original classification corpus.
    Imagenet,
}

impl NormalizationChoice {
    pub fn stats(&self) -> Normalization {
        match self {
            NormalizationChoice::Identity => Normalization::identity(),
            NormalizationChoice::Imagenet => Normalization::imagenet(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub plan: PlanChoice,
    pub mafm_pool: MafmPool,
    pub decoder_mode: DecoderMode,
    /// Condition the critic on both input images (7 channels) instead of the
    /// bare change map.
    pub cond_disc: bool,
    pub normalization: NormalizationChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub max_iter: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Inner alternation count: G steps then D steps per iteration.
    pub m_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Self-training rounds after the initial phase (adversarial variant
    /// only; others have no critic to score pseudo-labels with).
    pub self_train_rounds: u32,
    /// Critic score a predicted map must exceed to become a pseudo-label.
    pub pseudo_label_threshold: f64,
    /// Validation cadence in iterations.
    pub eval_every: u64,
    /// Loss-log cadence in iterations.
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding A/, B/, label/ and the split manifests.
    pub root: String,
    /// Enable flip/crop augmentation during training.
    pub augment: bool,
}

/// The complete experiment description. Everything that affects the result
/// is in here; the fingerprint of the canonical form is stamped into
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Minutes-scale CPU profile: thin trunk, 300 iterations, batch 4.
    pub fn desk() -> Self {
        ExperimentConfig {
            variant: Variant::MC,
            seed: 7,
            model: ModelConfig {
                plan: PlanChoice::Tiny,
                mafm_pool: MafmPool::Avg,
                decoder_mode: DecoderMode::Recursive,
                cond_disc: false,
                normalization: NormalizationChoice::Identity,
            },
            optim: OptimConfig {
                base_lr: 5e-4,
                max_iter: 300,
                batch_size: 4,
                beta1: 0.9,
                beta2: 0.99,
                weight_decay: 1e-4,
                m_steps: 1,
            },
            train: TrainConfig {
                self_train_rounds: 0,
                pseudo_label_threshold: 0.8,
                eval_every: 100,
                log_every: 10,
            },
            data: DataConfig { root: "data/synth".to_string(), augment: false },
        }
    }

    /// The published recipe: bottleneck trunk, 80000 iterations, batch 16.
    pub fn paper() -> Self {
        ExperimentConfig {
            variant: Variant::Full,
            seed: 7,
            model: ModelConfig {
                plan: PlanChoice::Resnet50,
                mafm_pool: MafmPool::Avg,
                decoder_mode: DecoderMode::Recursive,
                cond_disc: false,
                normalization: NormalizationChoice::Imagenet,
            },
            optim: OptimConfig {
                base_lr: 5e-4,
                max_iter: 80_000,
                batch_size: 16,
                beta1: 0.9,
                beta2: 0.99,
                weight_decay: 1e-4,
                m_steps: 1,
            },
            train: TrainConfig {
                self_train_rounds: 1,
                pseudo_label_threshold: 0.8,
                eval_every: 1000,
                log_every: 50,
            },
            data: DataConfig { root: "data/levir".to_string(), augment: true },
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.optim.base_lr > 0.0) {
            return fail(format!("optim.base_lr must be > 0, got {}", self.optim.base_lr));
        }
        if self.optim.max_iter < 1 {
            return fail("optim.max_iter must be >= 1".into());
        }
        for (name, b) in [("beta1", self.optim.beta1), ("beta2", self.optim.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return fail(format!("optim.{name} must lie in (0,1), got {b}"));
            }
        }
        if self.optim.batch_size < 1 {
            return fail("optim.batch_size must be >= 1".into());
        }
        if self.optim.m_steps < 1 {
            return fail("optim.m_steps must be >= 1".into());
        }
        if self.optim.weight_decay < 0.0 {
            return fail(format!(
                "optim.weight_decay must be >= 0, got {}",
                self.optim.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.train.pseudo_label_threshold) {
            return fail(format!(
                "train.pseudo_label_threshold must lie in [0,1], got {}",
                self.train.pseudo_label_threshold
            ));
        }
        if self.train.log_every < 1 || self.train.eval_every < 1 {
            return fail("train.log_every and train.eval_every must be >= 1".into());
        }
        Ok(())
    }

    /// Self-training needs a critic to score confidence; without adversarial
    /// training the configured rounds collapse to zero.
    pub fn effective_self_train_rounds(&self) -> u32 {
        if self.variant.adversarial() {
            self.train.self_train_rounds
        } else {
            0
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Strict parse: unknown fields anywhere are config errors.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: field order fixed by the struct definitions,
    /// so equal configs produce byte-equal text.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_toml())?;
        Ok(())
    }

    /// Hex digest of the canonical form; stamped into checkpoints so a
    /// checkpoint can refuse to load under a different configuration.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Applies one `section.key=value` override (e.g. `optim.base_lr=1e-3`,
    /// `variant=R`). The path must name an existing field and the value must
    /// parse as that field's type.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw_value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{assignment}' is not of the form path=value"))
        })?;
        let path = path.trim();
        let raw_value = raw_value.trim();
        if path.is_empty() {
            return Err(Error::Config(format!("override '{assignment}' has an empty path")));
        }

        let mut doc = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("config reserialization failed: {e}")))?;

        // Walk to the addressed leaf.
        let segments: Vec<&str> = path.split('.').collect();
        let mut cursor = &mut doc;
        for (i, seg) in segments.iter().enumerate() {
            let table = cursor.as_table_mut().ok_or_else(|| {
                Error::Config(format!(
                    "override path '{path}': '{}' is not a section",
                    segments[..i].join(".")
                ))
            })?;
            cursor = table.get_mut(*seg).ok_or_else(|| {
                Error::Config(format!("override path '{path}': unknown key '{seg}'"))
            })?;
        }

        // Parse the value with the existing leaf's type as the contract.
        let new_value = match cursor {
            toml::Value::String(_) => toml::Value::String(raw_value.to_string()),
            toml::Value::Integer(_) => toml::Value::Integer(
                raw_value
                    .parse::<i64>()
                    .map_err(|_| Error::Config(format!("'{raw_value}' is not an integer")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                raw_value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("'{raw_value}' is not a number")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                raw_value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("'{raw_value}' is not a boolean")))?,
            ),
            other => {
                return Err(Error::Config(format!(
                    "override path '{path}' addresses a {} value, which cannot be overridden",
                    other.type_str()
                )))
            }
        };
        *cursor = new_value;

        let updated: ExperimentConfig = doc
            .try_into()
            .map_err(|e| Error::Config(format!("override '{assignment}' rejected: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_differ_where_expected() {
        let desk = ExperimentConfig::desk();
        let paper = ExperimentConfig::paper();
        desk.validate().unwrap();
        paper.validate().unwrap();
        assert_eq!(desk.optim.max_iter, 300);
        assert_eq!(desk.optim.batch_size, 4);
        assert_eq!(paper.optim.max_iter, 80_000);
        assert_eq!(paper.optim.batch_size, 16);
        assert_eq!(paper.optim.base_lr, 5e-4);
        assert_eq!(desk.optim.base_lr, 5e-4);
        assert!(ExperimentConfig::profile("gpu-cluster").is_err());
    }

    #[test]
    fn canonical_round_trip_is_byte_stable() {
        let cfg = ExperimentConfig::desk();
        let text = cfg.canonical_toml();
        let reparsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.canonical_toml(), text, "canonical form must be a fixed point");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = ExperimentConfig::desk().canonical_toml();

        let extra_section = format!("{text}\n[rocket]\nthrust = 9000\n");
        assert!(matches!(ExperimentConfig::parse(&extra_section), Err(Error::Config(_))));

        let extra_key = text.replace("[optim]", "[optim]\nwarp_factor = 3");
        assert!(ExperimentConfig::parse(&extra_key).is_err());
    }

    #[test]
    fn overrides_change_exactly_the_addressed_field() {
        let mut cfg = ExperimentConfig::desk();
        let before = cfg.clone();
        cfg.apply_override("optim.base_lr=0.001").unwrap();
        assert_eq!(cfg.optim.base_lr, 0.001);
        cfg.apply_override("variant=R").unwrap();
        assert_eq!(cfg.variant, Variant::R);
        cfg.apply_override("model.plan=micro").unwrap();
        assert_eq!(cfg.model.plan, PlanChoice::Micro);
        cfg.apply_override("data.augment=true").unwrap();
        assert!(cfg.data.augment);
        // Untouched sections survive intact.
        assert_eq!(cfg.train, before.train);
    }

    #[test]
    fn bad_overrides_are_rejected_with_field_context() {
        let mut cfg = ExperimentConfig::desk();
        for bad in [
            "optim.warp=9",          // unknown key
            "nosuch.base_lr=1",      // unknown section
            "optim.base_lr=fast",    // type mismatch
            "optim.base_lr=-1.0",    // fails validation
            "optim=everything",      // addresses a whole section
            "justaword",             // no '='
            "variant=Z",             // not a variant
        ] {
            let before = cfg.clone();
            assert!(cfg.apply_override(bad).is_err(), "override '{bad}' must fail");
            assert_eq!(cfg, before, "failed override '{bad}' must not mutate the config");
        }
    }

    #[test]
    fn fingerprint_tracks_content_not_identity() {
        let a = ExperimentConfig::desk();
        let mut b = ExperimentConfig::desk();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 8;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64, "sha-256 hex digest");
    }

    #[test]
    fn self_training_requires_the_adversarial_variant() {
        let mut cfg = ExperimentConfig::desk();
        cfg.train.self_train_rounds = 2;
        cfg.variant = Variant::MC;
        assert_eq!(cfg.effective_self_train_rounds(), 0);
        cfg.variant = Variant::Full;
        assert_eq!(cfg.effective_self_train_rounds(), 2);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let cfg = ExperimentConfig::paper();
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }
}
