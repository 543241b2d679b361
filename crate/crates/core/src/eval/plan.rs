use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{penalty_grid, FinetuneConfig, SolverConfig};
use crate::autoencoder::AutoencoderConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::multitask::HealthNetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LR-baseline")]
    LrBaseline,
    #[serde(rename = "RNN-C")]
    RnnC,
    #[serde(rename = "TimeNet-48")]
    TimeNet48,
    #[serde(rename = "TimeNet-All")]
    TimeNetAll,
    #[serde(rename = "TimeNet-48-Eps")]
    TimeNet48Eps,
    #[serde(rename = "TimeNet-All-Eps")]
    TimeNetAllEps,
    #[serde(rename = "HN-Tune")]
    HnTune,
    #[serde(rename = "HN-L1")]
    HnL1,
    #[serde(rename = "HN-L2")]
    HnL2,
    #[serde(rename = "HN-LR-1")]
    HnLr1,
    #[serde(rename = "HN-LR-2")]
    HnLr2,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::LrBaseline,
        Method::RnnC,
        Method::TimeNet48,
        Method::TimeNetAll,
        Method::TimeNet48Eps,
        Method::TimeNetAllEps,
        Method::HnTune,
        Method::HnL1,
        Method::HnL2,
        Method::HnLr1,
        Method::HnLr2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LrBaseline => "LR-baseline",
            Method::RnnC => "RNN-C",
            Method::TimeNet48 => "TimeNet-48",
            Method::TimeNetAll => "TimeNet-All",
            Method::TimeNet48Eps => "TimeNet-48-Eps",
            Method::TimeNetAllEps => "TimeNet-All-Eps",
            Method::HnTune => "HN-Tune",
            Method::HnL1 => "HN-L1",
            Method::HnL2 => "HN-L2",
            Method::HnLr1 => "HN-LR-1",
            Method::HnLr2 => "HN-LR-2",
        }
    }

    pub fn uses_timenet(self) -> bool {
        matches!(self, Method::TimeNet48 | Method::TimeNetAll | Method::TimeNet48Eps | Method::TimeNetAllEps)
    }

    pub fn uses_healthnet(self) -> bool {
        matches!(self, Method::HnTune | Method::HnL1 | Method::HnL2 | Method::HnLr1 | Method::HnLr2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSpec {
    Synthetic { config: SynthConfig },
    /// A dataset bundle written by `synth-data` or `load-data`.
    Bundle { path: PathBuf },
}

/// Univariate corpus for autoencoder pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_series: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_series: 200,
            min_len: 24,
            max_len: 48,
        }
    }
}

/// Grid of `count` LASSO penalties between `lo` and `hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlphaGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub log_scale: bool,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            lo: 1e-5,
            hi: 1e-3,
            count: 5,
            log_scale: false,
        }
    }
}

impl AlphaGrid {
    pub fn values(&self) -> Vec<f64> {
        penalty_grid(self.lo, self.hi, self.count, self.log_scale)
    }
}

/// Pre-trained artifacts to load instead of training them in-process.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Checkpoints {
    pub autoencoder: Option<PathBuf>,
    pub healthnet: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    /// Tasks to evaluate; defaults to the dataset's target tasks.
    pub tasks: Option<Vec<String>>,
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tau: usize,
    pub window_shift: usize,
    pub corpus: CorpusConfig,
    pub autoencoder: AutoencoderConfig,
    pub healthnet: HealthNetConfig,
    pub rnnc: HealthNetConfig,
    pub finetune: FinetuneConfig,
    /// Candidate penalties for HN-L1 / HN-L2, chosen per cell by validation
    /// cross-entropy.
    pub finetune_lambdas: Vec<f64>,
    pub alpha_grid: AlphaGrid,
    pub lambda_grid: Vec<f64>,
    pub lambda_scale: LambdaScale,
    pub solver: SolverConfig,
    pub checkpoints: Checkpoints,
}

/// How the L1 logistic grid is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScale {
    /// Grid values are `λ` in `mean NLL + λ‖w‖₁`.
    Penalty,
    /// Grid values are an inverse strength `C` in `C·Σ NLL + ‖w‖₁`, i.e.
    /// `λ = 1 / (C·N)` for `N` training rows. Larger values mean weaker
    /// penalties.
    #[default]
    InverseC,
}

impl LambdaScale {
    pub fn penalties(self, grid: &[f64], n_train: usize) -> Vec<f64> {
        match self {
            LambdaScale::Penalty => grid.to_vec(),
            LambdaScale::InverseC => grid.iter().map(|c| 1.0 / (c * n_train.max(1) as f64)).collect(),
        }
    }
}

pub const PLAN_SCHEMA_VERSION: u32 = 1;

impl Default for ExperimentPlan {
    fn default() -> Self {
        let net = HealthNetConfig {
            widths: vec![16, 16],
            dropout: 0.3,
            tau: 48,
            train: TrainConfig {
                epochs: 80,
                batch_size: 16,
                lr: 1e-2,
                clip_norm: 5.0,
                patience: 10,
            },
        };
        let finetune = FinetuneConfig {
            train: net.train.clone(),
            ..Default::default()
        };
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            seed: 0,
            data: DataSpec::Synthetic {
                config: SynthConfig::default(),
            },
            tasks: None,
            methods: Method::ALL.to_vec(),
            fractions: vec![1.0, 0.5, 0.2, 0.1],
            seeds: (0..5).collect(),
            tau: 48,
            window_shift: 24,
            corpus: CorpusConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            healthnet: net.clone(),
            rnnc: net,
            finetune,
            finetune_lambdas: vec![0.01, 0.03, 0.1],
            alpha_grid: AlphaGrid::default(),
            lambda_grid: vec![0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0],
            lambda_scale: LambdaScale::InverseC,
            solver: SolverConfig::default(),
            checkpoints: Checkpoints::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "plan schema version {} is not supported (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() || self.fractions.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one method, fraction and seed".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        if self.tau == 0 || self.window_shift == 0 {
            return Err(Error::Config("tau and window_shift must be positive".into()));
        }
        if self.lambda_grid.is_empty() || self.finetune_lambdas.is_empty() || self.alpha_grid.count == 0 {
            return Err(Error::Config("penalty grids must be non-empty".into()));
        }
        if self.lambda_grid.iter().chain(&self.finetune_lambdas).any(|v| !(v.is_finite() && *v >= 0.0))
            || (self.lambda_scale == LambdaScale::InverseC && self.lambda_grid.contains(&0.0))
        {
            return Err(Error::Config("penalty grid values must be finite and non-negative (positive for an inverse grid)".into()));
        }
        Ok(())
    }
}
