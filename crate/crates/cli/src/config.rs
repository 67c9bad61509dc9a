//! Experiment configuration: a JSON file whose omitted fields take the
//! defaults below, then command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::Context;
use poolerleak::{Activation, AttackConfig, DecomposeMethod, FeaturePhase, LossKind, ReconPath};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub recover: RecoverSpec,
    pub attack: AttackSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { seeds: (0..10).collect(), recover: RecoverSpec::default(), attack: AttackSpec::default() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Feature-recovery sweep on synthetic batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverSpec {
    pub vocab_size: usize,
    pub d: usize,
    pub d_emb: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub activation: Activation,
    /// Loss of the observed gradients; follows the path when unset.
    pub loss: Option<LossKind>,
    pub path: ReconPath,
    pub method: DecomposeMethod,
    pub restarts: usize,
    pub control_variate: bool,
    pub d_rec: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

impl Default for RecoverSpec {
    fn default() -> Self {
        RecoverSpec {
            vocab_size: 20_100,
            d: 100,
            d_emb: 32,
            n_classes: 2,
            max_len: 16,
            min_len: 4,
            activation: Activation::Selu,
            loss: None,
            path: ReconPath::Mse,
            method: DecomposeMethod::Jennrich,
            restarts: 4,
            control_variate: true,
            d_rec: vec![32, 50],
            batch_sizes: vec![1, 2, 4],
        }
    }
}

impl RecoverSpec {
    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(match self.path {
            ReconPath::Ce => LossKind::Ce,
            ReconPath::Mse | ReconPath::ReluH4 => LossKind::Mse,
        })
    }
}

/// Text-recovery experiment on a labelled TSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// `label<TAB>text` file; the bundled short toy set when unset.
    pub dataset: Option<PathBuf>,
    /// One sentence per line; the bundled prior corpus when unset.
    pub prior_corpus: Option<PathBuf>,
    pub vocab_max: usize,
    /// Longer dataset lines are skipped.
    pub max_len: usize,
    pub prior_order: usize,
    pub prior_k: f64,
    pub d_emb: usize,
    pub d: usize,
    pub d_rec: usize,
    pub activation: Activation,
    pub loss: LossKind,
    pub recon_path: ReconPath,
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<FeaturePhase>,
    /// Search settings; `feature_phase` and `seed` are set per run.
    pub search: AttackConfig,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            dataset: None,
            prior_corpus: None,
            vocab_max: 512,
            max_len: 8,
            prior_order: 2,
            prior_k: 0.1,
            d_emb: 64,
            d: 96,
            d_rec: 16,
            activation: Activation::Selu,
            loss: LossKind::Ce,
            recon_path: ReconPath::Ce,
            batch_sizes: vec![1, 2, 4],
            modes: vec![FeaturePhase::None, FeaturePhase::ContinuousOnly],
            search: AttackConfig::default(),
        }
    }
}

/// Parses `1,2,3`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list item {p:?}: {e}")))
        .collect()
}
