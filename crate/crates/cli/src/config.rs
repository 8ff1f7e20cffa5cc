use std::fmt;
use std::path::{Path, PathBuf};

use mwal_core::eval::ProbeConfig;
use mwal_core::gcca::FeatureMapKind;
use mwal_core::gcpa::{TrainConfig, Trust};
use mwal_core::GpaConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// User-facing configuration mistakes. Reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Library errors caused by bad inputs become config errors; the rest pass through.
pub fn as_config(e: mwal_core::Error) -> anyhow::Error {
    use mwal_core::Error as E;
    match e {
        E::InvalidInput(_)
        | E::InvalidRank { .. }
        | E::Shape(_)
        | E::Correspondence(_)
        | E::Lookup(_)
        | E::InvalidSpec(_)
        | E::Format { .. }
        | E::Io { .. } => config_error(e.to_string()),
        other => other.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// No alignment: compare raw (preprocessed) coordinates.
    Na,
    /// Independent pairwise orthogonal maps.
    Pw,
    #[default]
    Gpa,
    Gcca,
    Gcpa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Na => "na",
            Method::Pw => "pw",
            Method::Gpa => "gpa",
            Method::Gcca => "gcca",
            Method::Gcpa => "gcpa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Standardize {
    None,
    /// Per-dimension centering and one scalar scale (keeps rotations exact).
    #[default]
    Global,
    /// Per-dimension centering and per-dimension unit variance.
    PerDimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GccaSection {
    /// Shared rank; defaults to the common dimension.
    pub rank: Option<usize>,
    pub feature_map: FeatureMapKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcpaSection {
    pub tau: f64,
    pub lambda: f64,
    pub rescale_gpa_norm: bool,
    pub train: TrainConfig,
}

impl Default for GcpaSection {
    fn default() -> Self {
        let t = Trust::default();
        Self {
            tau: t.tau,
            lambda: t.lambda,
            rescale_gpa_norm: false,
            train: TrainConfig::default(),
        }
    }
}

impl GcpaSection {
    pub fn trust(&self) -> Trust {
        Trust {
            tau: self.tau,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub retrieval: bool,
    pub probe: bool,
    pub cluster: bool,
    pub agreement: bool,
    pub drift: bool,
    pub cluster_seeds: usize,
    pub probe_config: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            retrieval: true,
            probe: true,
            cluster: true,
            agreement: true,
            drift: true,
            cluster_seeds: 5,
            probe_config: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub taus: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            taus: vec![0.01, 0.02, 0.05, 0.10],
            lambdas: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// Target dimension for PCA when spaces differ in width.
    pub common_dim: Option<usize>,
    pub standardize: Standardize,
    pub gpa: GpaConfig,
    pub gcca: GccaSection,
    pub gcpa: GcpaSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            common_dim: None,
            standardize: Standardize::default(),
            gpa: GpaConfig::default(),
            gcca: GccaSection::default(),
            gcpa: GcpaSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            out: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.common_dim == Some(0) {
            return Err(config_error("common_dim must be positive"));
        }
        if self.gcca.rank == Some(0) {
            return Err(config_error("gcca.rank must be positive"));
        }
        let g = &self.gcpa;
        if !(g.tau >= 0.0 && g.lambda >= 0.0 && g.tau.is_finite() && g.lambda.is_finite()) {
            return Err(config_error("gcpa.tau and gcpa.lambda must be finite and non-negative"));
        }
        if self.eval.cluster_seeds == 0 {
            return Err(config_error("eval.cluster_seeds must be positive"));
        }
        if self.sweep.taus.is_empty() || self.sweep.lambdas.is_empty() {
            return Err(config_error("sweep grid must have at least one tau and one lambda"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
