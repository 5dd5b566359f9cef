use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{at_path, Error, Result};
use crate::losses::LossConfig;
use crate::metrics::ThresholdRule;
use crate::model::ModelConfig;
use crate::parallel::Exec;
use crate::pdle::{EncodingMode, PdleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum Protocol {
    /// Train and test on the same domains, split per domain and class.
    #[default]
    Intra,
    /// Train on every domain except `held_out`, test on it.
    LeaveOneOut { held_out: usize },
}


/// How the gradient-reversal coefficient evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BetaSchedule {
    /// `beta` throughout.
    #[default]
    Constant,
    /// `beta * (2 / (1 + exp(-steepness * p)) - 1)` where `p` in `[0, 1)` is
    /// the fraction of optimizer steps already taken.
    Ramp { steepness: f64 },
}

impl BetaSchedule {
    pub fn coefficient(self, beta: f64, progress: f64) -> f64 {
        match self {
            BetaSchedule::Constant => beta,
            BetaSchedule::Ramp { steepness } => {
                beta * (2.0 / (1.0 + (-steepness * progress).exp()) - 1.0)
            }
        }
    }
}

/// Everything a training run needs. Missing keys in a config file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub beta_schedule: BetaSchedule,
    pub p_apply: f64,
    pub encoding: EncodingMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Network input (crop) size; stored images must be at least this big.
    pub crop_size: (usize, usize),
    pub encoder_widths: Vec<usize>,
    pub domain_hidden: usize,
    pub train_manifests: Vec<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub protocol: Protocol,
    /// Fraction of each (domain, class) group held out as the test split
    /// under the intra protocol when no test manifest is given.
    pub intra_test_fraction: f64,
    pub threshold: ThresholdRule,
    pub exec: Exec,
    /// Write every exchange record to the training log.
    pub log_exchanges: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            alpha: 0.5,
            beta: 1.0,
            beta_schedule: BetaSchedule::Constant,
            p_apply: 0.5,
            encoding: EncodingMode::Full,
            learning_rate: 1e-4,
            weight_decay: 2e-4,
            lr_gamma: 0.99,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            crop_size: (56, 56),
            encoder_widths: vec![16, 32, 64],
            domain_hidden: 32,
            train_manifests: Vec::new(),
            test_manifest: None,
            protocol: Protocol::Intra,
            intra_test_fraction: 0.2,
            threshold: ThresholdRule::DevEer,
            exec: Exec::Parallel,
            log_exchanges: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if let BetaSchedule::Ramp { steepness } = self.beta_schedule {
            if !(steepness > 0.0 && steepness.is_finite()) {
                return bad(format!("beta ramp steepness must be positive, got {steepness}"));
            }
        }
        if !(self.intra_test_fraction > 0.0 && self.intra_test_fraction < 1.0) {
            return bad(format!(
                "intra_test_fraction must lie in (0, 1), got {}",
                self.intra_test_fraction
            ));
        }
        self.pdle(0).validate()?;
        self.loss().validate()?;
        self.model(2).validate()?;
        Ok(())
    }

    pub fn pdle(&self, seed: u64) -> PdleConfig {
        PdleConfig {
            k: self.k,
            p_apply: self.p_apply,
            rng_seed: seed,
            mode: self.encoding,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Model configuration for `domains` training domains. The discriminator
    /// is dropped when the domain loss carries no weight.
    pub fn model(&self, domains: usize) -> ModelConfig {
        ModelConfig {
            k: self.k,
            domains: if self.adversarial() { domains } else { 0 },
            beta: self.beta,
            encoder_widths: self.encoder_widths.clone(),
            domain_hidden: self.domain_hidden,
            input_size: self.crop_size,
        }
    }

    /// Short name of the label-encoding variant.
    pub fn encoding_name(&self) -> String {
        match self.encoding {
            EncodingMode::Full => "full",
            EncodingMode::PatchOnly => "w/o LE",
            EncodingMode::LabelOnly => "w/o PE",
            EncodingMode::Off => "w/o PE&LE",
        }
        .to_string()
    }

    pub fn adversarial(&self) -> bool {
        self.alpha < 1.0
    }

    /// Parses a TOML key-value file.
    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(at_path(path))?;
        TrainConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
