use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{suggest_gamma, Aggregation, ResetPolicy};
use crate::mask::{ClientConfig, Optimizer};
use crate::nn::NetworkArch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Simple,
    Bayes,
}

/// Reset period of the Beta priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum GammaSetting {
    /// `round(N / K)`.
    Auto,
    Never,
    Every(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Every(u32),
    Named(String),
}

impl TryFrom<GammaRepr> for GammaSetting {
    type Error = String;

    fn try_from(value: GammaRepr) -> std::result::Result<Self, String> {
        match value {
            GammaRepr::Every(0) => Err("gamma must be at least 1".into()),
            GammaRepr::Every(g) => Ok(GammaSetting::Every(g)),
            GammaRepr::Named(s) => match s.as_str() {
                "auto" => Ok(GammaSetting::Auto),
                "never" => Ok(GammaSetting::Never),
                other => Err(format!("gamma must be an integer, \"auto\" or \"never\", got {other:?}")),
            },
        }
    }
}

impl From<GammaSetting> for GammaRepr {
    fn from(g: GammaSetting) -> Self {
        match g {
            GammaSetting::Auto => GammaRepr::Named("auto".into()),
            GammaSetting::Never => GammaRepr::Named("never".into()),
            GammaSetting::Every(n) => GammaRepr::Every(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Fedpm,
    Signsgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Sample,
    Threshold,
}

/// Gaussian blob generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub dims: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 6000,
            test: 2000,
            dims: 784,
            classes: 10,
            separation: 40.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Layer widths `[input, hidden..., classes]`.
    pub arch: Vec<usize>,
    /// Total number of clients `N`.
    pub clients: usize,
    /// Participants per round `K`.
    pub participants: usize,
    pub rounds: usize,
    pub aggregation: AggregationKind,
    pub lambda0: f64,
    pub gamma: GammaSetting,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub data: DataSource,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub partition: PartitionKind,
    pub c_max: usize,
    pub baseline: Baseline,
    /// Step size of the SignSGD server update.
    pub server_lr: f64,
    pub distill: DistillMode,
    pub alpha_ths: f64,
    pub dp: Option<DpSettings>,
    /// Standard deviation of the initial server scores.
    pub score_init_std: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: vec![784, 200, 200, 10],
            clients: 10,
            participants: 10,
            rounds: 30,
            aggregation: AggregationKind::Simple,
            lambda0: 1.0,
            gamma: GammaSetting::Auto,
            learning_rate: 0.1,
            optimizer: Optimizer::default(),
            local_epochs: 3,
            batch_size: 128,
            data: DataSource::Synthetic,
            data_dir: None,
            synthetic: SyntheticSpec::default(),
            partition: PartitionKind::Iid,
            c_max: 2,
            baseline: Baseline::Fedpm,
            server_lr: 1e-3,
            distill: DistillMode::Threshold,
            alpha_ths: 0.5,
            dp: None,
            score_init_std: 0.01,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without validating, for callers that apply overrides first.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::load_unvalidated(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_unvalidated(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_toml(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn network(&self) -> Result<NetworkArch> {
        NetworkArch::mlp(&self.arch)
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }

    /// Participation ratio `ρ = K / N`.
    pub fn participation(&self) -> f64 {
        self.participants as f64 / self.clients as f64
    }

    pub fn reset_policy(&self) -> Result<ResetPolicy> {
        match self.gamma {
            GammaSetting::Never => Ok(ResetPolicy::never()),
            GammaSetting::Every(g) => ResetPolicy::every(g),
            GammaSetting::Auto => ResetPolicy::every(suggest_gamma(self.participation())?),
        }
    }

    pub fn aggregation_strategy(&self) -> Result<Aggregation> {
        Ok(match self.aggregation {
            AggregationKind::Simple => Aggregation::Simple,
            AggregationKind::Bayes => Aggregation::Bayes {
                lambda0: self.lambda0,
                reset: self.reset_policy()?,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.network()?;
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.participants == 0 || self.participants > self.clients {
            return Err(Error::Config(format!(
                "participants must be in 1..={}, got {}",
                self.clients, self.participants
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.client_config().validate()?;
        if !(self.alpha_ths > 0.0 && self.alpha_ths < 1.0) {
            return Err(Error::Config(format!(
                "alpha_ths must be in (0, 1), got {}",
                self.alpha_ths
            )));
        }
        if !(self.lambda0 > 0.0) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.score_init_std >= 0.0 && self.score_init_std.is_finite()) {
            return Err(Error::Config("score_init_std must be finite and non-negative".into()));
        }
        if self.partition == PartitionKind::Noniid && self.c_max == 0 {
            return Err(Error::Config("c_max must be at least 1".into()));
        }
        if self.data == DataSource::Idx && self.data_dir.is_none() {
            return Err(Error::Config("IDX data needs data_dir".into()));
        }
        if self.data == DataSource::Synthetic {
            let s = &self.synthetic;
            if s.dims != arch.input_dim() {
                return Err(Error::Config(format!(
                    "synthetic dims {} do not match the network input {}",
                    s.dims,
                    arch.input_dim()
                )));
            }
            if s.classes != arch.output_dim() {
                return Err(Error::Config(format!(
                    "synthetic classes {} do not match the network output {}",
                    s.classes,
                    arch.output_dim()
                )));
            }
            if s.test == 0 {
                return Err(Error::Config("synthetic test set must be non-empty".into()));
            }
        }
        if let Some(dp) = &self.dp {
            crate::privacy::DpConfig::new(dp.epsilon, dp.delta, dp.clip, arch.param_count())?;
        }
        self.reset_policy()?;
        Ok(())
    }
}
