use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use fusedmax::likelihood::{Lambda, PairScheme, PenaltyPower, PenaltySpec};
use fusedmax::simulator::Scale;

/// A problem with the configuration itself; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub sites: Option<SitesCfg>,
    pub partition: Option<PartitionCfg>,
    pub truth: Option<TruthCfg>,
    pub simulate: Option<SimulateCfg>,
    pub data: Option<DataCfg>,
    pub pairs: Option<PairsCfg>,
    pub penalty: Option<PenaltyCfg>,
    pub fit: Option<FitCfg>,
    pub merge: Option<MergeCfg>,
    pub diagnose: Option<DiagnoseCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SitesCfg {
    pub path: Option<PathBuf>,
    /// Cell-centred regular grid on the unit square, `[nx, ny]`.
    pub grid: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionCfg {
    /// `single`, `grid`, `kmeans` or `file`.
    pub kind: String,
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub regions: Option<usize>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthCfg {
    /// One value per region, or a single value for all regions.
    pub sigma2: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    /// Alternatively a field table.
    pub field: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCfg {
    #[serde(default = "default_m_star")]
    pub m_star: usize,
    pub n_replicates: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_m_star() -> usize {
    10_000
}

fn default_jitter() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    pub panel: PathBuf,
    /// `unit_frechet` or `raw`; raw panels are rank-transformed.
    pub scale: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsCfg {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_scheme() -> String {
    "simple".into()
}

fn default_fraction() -> f64 {
    0.01
}

fn default_classes() -> usize {
    10
}

impl Default for PairsCfg {
    fn default() -> Self {
        Self { scheme: default_scheme(), fraction: default_fraction(), classes: default_classes() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LambdaValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyCfg {
    #[serde(default = "default_q")]
    pub q: u32,
    pub lambda1: Option<LambdaValue>,
    pub lambda2: Option<LambdaValue>,
}

fn default_q() -> u32 {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCfg {
    pub n_starts: Option<usize>,
    pub max_iter: Option<usize>,
    pub start_sd: Option<f64>,
    pub init_field: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeCfg {
    /// Positive descending grid values between the leading inf and the final 0.
    pub grid: Vec<f64>,
    /// Separate values for the range coordinate; defaults to `grid`.
    pub grid2: Option<Vec<f64>>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_holdout")]
    pub validation_fraction: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_thresholds")]
    pub thresholds: usize,
}

fn default_folds() -> usize {
    5
}

fn default_holdout() -> f64 {
    0.15
}

fn default_thresholds() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseCfg {
    pub field: PathBuf,
    /// Site strata for the MAD summary (`id,region`); defaults to the partition.
    pub strata: Option<PathBuf>,
    /// Reference partition for the Rand indices.
    pub reference: Option<PathBuf>,
    /// True field and partition for IntRMSE.
    pub truth_field: Option<PathBuf>,
    pub truth_partition: Option<PathBuf>,
    /// Fraction of pairs in the extremal coefficient table; all when absent.
    pub pair_fraction: Option<f64>,
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn section<'a, S>(&self, s: &'a Option<S>, name: &str) -> anyhow::Result<&'a S> {
        s.as_ref().ok_or_else(|| config_err(format!("missing [{name}] section")))
    }
}

/// Resolves `p` against the directory of the config file and checks that it exists.
pub fn existing(base: &Path, p: &Path, key: &str) -> anyhow::Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(config_err(format!("{key}: {} does not exist", full.display())));
    }
    Ok(full)
}

pub fn scheme(p: &PairsCfg) -> anyhow::Result<PairScheme> {
    PairScheme::parse(&p.scheme).map_err(|e| config_err(format!("pairs.scheme: {e}")))
}

pub fn scale(d: &DataCfg) -> anyhow::Result<Scale> {
    match d.scale.as_deref() {
        None => Ok(Scale::UnitFrechet),
        Some(s) => Scale::parse(s).map_err(|e| config_err(format!("data.scale: {e}"))),
    }
}

fn lambda(v: &Option<LambdaValue>, key: &str) -> anyhow::Result<Lambda<f64>> {
    match v {
        None => Ok(Lambda::Infinite),
        Some(LambdaValue::Text(s)) if s.trim().eq_ignore_ascii_case("inf") => Ok(Lambda::Infinite),
        Some(LambdaValue::Text(s)) => Err(config_err(format!("{key}: expected a number or \"inf\", got {s:?}"))),
        Some(LambdaValue::Number(x)) if x.is_infinite() && *x > 0.0 => Ok(Lambda::Infinite),
        Some(LambdaValue::Number(x)) => Lambda::finite(*x).map_err(|e| config_err(format!("{key}: {e}"))),
    }
}

pub fn power(p: Option<&PenaltyCfg>) -> anyhow::Result<PenaltyPower> {
    PenaltyPower::from_q(p.map_or(2, |p| p.q)).map_err(|e| config_err(format!("penalty.q: {e}")))
}

pub fn penalty(p: Option<&PenaltyCfg>) -> anyhow::Result<PenaltySpec<f64>> {
    let q = power(p)?;
    match p {
        None => Ok(PenaltySpec::stationary(q)),
        Some(p) => Ok(PenaltySpec::new(lambda(&p.lambda1, "penalty.lambda1")?, lambda(&p.lambda2, "penalty.lambda2")?, q)),
    }
}
