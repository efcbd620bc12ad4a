//! TOML experiment configuration: schema-checked, defaults documented here,
//! resolved form echoed into the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auxrank::{AnnealTag, GammaOrder};
use crate::error::{Error, Result};
use crate::toydiff::DatasetKind;
use crate::trainer::{Strategy, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

fn parse_field<T: std::str::FromStr<Err = Error>>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e: Error| Error::Config(format!("{field}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub w_bits: u32,
    pub a_bits: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        ModelSection {
            width: d.width,
            depth: d.depth,
            w_bits: d.w_bits,
            a_bits: d.a_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub warmup_frac: f64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub r0: usize,
    pub lambda: f64,
    pub anneal: String,
    pub gamma_order: String,
    pub refactorize: bool,
    pub decay_frac: f64,
    pub strategy: String,
    pub teacher_steps: usize,
    pub checkpoint_every: usize,
    pub spectra_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            steps: d.steps,
            warmup_frac: d.warmup_frac,
            base_lr: d.base_lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps_opt,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            r0: d.r0,
            lambda: d.lambda,
            anneal: d.anneal.name().into(),
            gamma_order: d.gamma_order.name().into(),
            refactorize: d.refactorize,
            decay_frac: d.decay_frac,
            strategy: d.strategy.name().into(),
            teacher_steps: d.teacher_steps,
            checkpoint_every: d.checkpoint_every,
            spectra_every: d.spectra_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: String,
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        DataSection {
            kind: d.dataset.name().into(),
            size: d.dataset_size,
        }
    }
}

/// Axes for `ablate`; the Cartesian product of the non-empty lists forms the
/// grid, with every other field shared from the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub strategy: Vec<String>,
    pub lambda: Vec<f64>,
    pub r0: Vec<usize>,
    pub anneal: Vec<String>,
    pub gamma_order: Vec<String>,
}

impl AblateSection {
    pub fn is_empty(&self) -> bool {
        self.strategy.is_empty()
            && self.lambda.is_empty()
            && self.r0.is_empty()
            && self.anneal.is_empty()
            && self.gamma_order.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub ablate: AblateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialize")
    }

    /// Resolve the string-typed fields into the runtime training config.
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.train.steps,
            warmup_frac: self.train.warmup_frac,
            base_lr: self.train.base_lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps_opt: self.train.eps,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            r0: self.train.r0,
            lambda: self.train.lambda,
            anneal: parse_field::<AnnealTag>("train.anneal", &self.train.anneal)?,
            gamma_order: parse_field::<GammaOrder>("train.gamma_order", &self.train.gamma_order)?,
            refactorize: self.train.refactorize,
            decay_frac: self.train.decay_frac,
            strategy: parse_field::<Strategy>("train.strategy", &self.train.strategy)?,
            seed: self.seed,
            w_bits: self.model.w_bits,
            a_bits: self.model.a_bits,
            width: self.model.width,
            depth: self.model.depth,
            dataset: parse_field::<DatasetKind>("data.kind", &self.data.kind)?,
            dataset_size: self.data.size,
            teacher_steps: self.train.teacher_steps,
            checkpoint_every: self.train.checkpoint_every,
            spectra_every: self.train.spectra_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let tc = cfg.to_train_config().unwrap();
        assert_eq!(tc.steps, 2000);
        assert_eq!(tc.strategy, Strategy::Rank);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[train]\nstepz = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn echo_round_trips_exactly() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 17;
        cfg.train.strategy = "sparse".into();
        cfg.train.steps = 123;
        let echoed = ExperimentConfig::from_toml(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, echoed);
    }

    #[test]
    fn bad_enum_names_the_field() {
        let cfg = ExperimentConfig::from_toml("[train]\nanneal = \"sawtooth\"\n").unwrap();
        let err = cfg.to_train_config().unwrap_err();
        assert!(err.to_string().contains("train.anneal"));
    }

    #[test]
    fn wrong_schema_version_rejected() {
        assert!(ExperimentConfig::from_toml("schema_version = 2\n").is_err());
    }
}
