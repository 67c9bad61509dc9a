//! Text recovery by gradient inversion: random initialization, continuous
//! descent on dummy embeddings and discrete token edits, optionally guided
//! by recovered Pooler-input directions.

mod decode;
mod phases;

pub use crate::model::{grad_match_loss, GradMatchKind};
pub use decode::{nearest_tokens, project_to_tokens};
pub use phases::{continuous_phase, discrete_phase, feature_match_loss, run_attack, AttackContext};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::metrics::RougeScores;
use crate::{Error, Result};

/// Where the feature-match term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePhase {
    #[default]
    None,
    DiscreteOnly,
    ContinuousOnly,
    Both,
}

impl FeaturePhase {
    pub const ALL: [FeaturePhase; 4] =
        [FeaturePhase::None, FeaturePhase::DiscreteOnly, FeaturePhase::ContinuousOnly, FeaturePhase::Both];

    pub fn in_continuous(self) -> bool {
        matches!(self, FeaturePhase::ContinuousOnly | FeaturePhase::Both)
    }

    pub fn in_discrete(self) -> bool {
        matches!(self, FeaturePhase::DiscreteOnly | FeaturePhase::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeaturePhase::None => "none",
            FeaturePhase::DiscreteOnly => "discrete_only",
            FeaturePhase::ContinuousOnly => "continuous_only",
            FeaturePhase::Both => "both",
        }
    }
}

impl std::fmt::Display for FeaturePhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeaturePhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeaturePhase::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature phase {s:?}")))
    }
}

/// How recovered features are paired with batch slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Features arrive already matched against the true Pooler inputs.
    #[default]
    Oracle,
    /// Features are matched to the optimizer's own Pooler inputs at the start
    /// of every phase.
    Blind,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(MatchMode::Oracle),
            "blind" => Ok(MatchMode::Blind),
            other => Err(Error::InvalidArgument(format!("unknown match mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// η_t = η₀·(1 + cos(π t / T)) / 2 within each continuous phase.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub n_inits: usize,
    /// Candidates carried from initialization into the rounds.
    pub keep: usize,
    pub rounds: usize,
    pub continuous_steps: usize,
    pub step_size: f64,
    pub schedule: StepSchedule,
    /// Adoption steps per example within one discrete phase.
    pub discrete_steps: usize,
    /// Replacement candidates per position.
    pub replace_top_k: usize,
    pub grad_kind: GradMatchKind,
    pub lambda_feat: f64,
    pub lambda_ppl: f64,
    pub feature_phase: FeaturePhase,
    pub match_mode: MatchMode,
    /// Ids below this are never produced by decoding (padding, unknown).
    pub min_token_id: u32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            n_inits: 16,
            keep: 2,
            rounds: 4,
            continuous_steps: 400,
            step_size: 100.0,
            schedule: StepSchedule::Cosine,
            discrete_steps: 8,
            replace_top_k: 5,
            grad_kind: GradMatchKind::Cosine,
            lambda_feat: 0.5,
            lambda_ppl: 0.1,
            feature_phase: FeaturePhase::None,
            match_mode: MatchMode::Oracle,
            min_token_id: crate::data::FIRST_TOKEN_ID,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Cosine gradient matching with the perplexity prior.
    pub fn lamp_cos() -> Self {
        AttackConfig::default()
    }

    /// L2 + α·L1 gradient matching, a single initialization, no prior.
    pub fn tag(alpha: f64) -> Self {
        AttackConfig {
            n_inits: 1,
            keep: 1,
            grad_kind: GradMatchKind::L2L1 { alpha },
            lambda_ppl: 0.0,
            ..AttackConfig::default()
        }
    }

    pub fn with_phase(mut self, phase: FeaturePhase) -> Self {
        self.feature_phase = phase;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_lamp_shaped(&self) -> bool {
        self.feature_phase == FeaturePhase::None
            && self.grad_kind == GradMatchKind::Cosine
            && self.lambda_ppl > 0.0
            && self.n_inits > 1
    }

    pub fn is_tag_shaped(&self) -> bool {
        self.feature_phase == FeaturePhase::None
            && matches!(self.grad_kind, GradMatchKind::L2L1 { .. })
            && self.lambda_ppl == 0.0
            && self.n_inits == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inits == 0 || self.keep == 0 {
            return Err(Error::InvalidArgument("n_inits and keep must be positive".into()));
        }
        if !(self.lambda_feat >= 0.0 && self.lambda_feat.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_feat must be >= 0, got {}", self.lambda_feat)));
        }
        if !(self.lambda_ppl >= 0.0 && self.lambda_ppl.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_ppl must be >= 0, got {}", self.lambda_ppl)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be finite and non-negative".into()));
        }
        if let GradMatchKind::L2L1 { alpha } = self.grad_kind {
            if !(alpha >= 0.0) {
                return Err(Error::InvalidArgument("l2_l1 alpha must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Loss components of one candidate, evaluated on its decoded tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateLosses {
    pub grad_match: f64,
    pub feature_match: Option<f64>,
    /// Batch mean; zero without a prior.
    pub log_ppl: f64,
    /// grad_match + λ_ppl·log_ppl (+ λ_feat·feature_match when the discrete
    /// phase uses features).
    pub score: f64,
}

/// One search candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateState {
    /// Per-example dummy token embeddings, `L_i × d_emb`.
    pub embeds: Vec<DMatrix<f64>>,
    /// Nearest-token projection of `embeds`.
    pub ids: Vec<Vec<u32>>,
    /// Mean dummy embedding reached by the last continuous phase, used to
    /// aim token replacements.
    pub target_means: Option<Vec<DVector<f64>>>,
    pub losses: CandidateLosses,
    pub init_index: usize,
    pub round: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Init,
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub init_index: usize,
    pub round: usize,
    pub phase: PhaseKind,
    /// Continuous: objective per step. Discrete: score after each adoption
    /// (first entry is the starting score). Init: the initial score.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Best recovered sequence per batch slot.
    pub tokens: Vec<Vec<u32>>,
    pub losses: CandidateLosses,
    pub best_init: usize,
    pub best_round: usize,
    pub traces: Vec<PhaseTrace>,
    /// Number of candidate states scored.
    pub evaluated: usize,
    pub diverged: usize,
    /// Per-example ROUGE against the references, once evaluated.
    pub metrics: Option<Vec<RougeScores>>,
    pub config: AttackConfig,
    pub seed: u64,
}

impl AttackResult {
    /// Fills `metrics` with per-example ROUGE (padding stripped).
    pub fn evaluate(&mut self, references: &[Vec<u32>], pad_id: u32) -> Result<&[RougeScores]> {
        if references.len() != self.tokens.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} references for {} recovered sequences",
                references.len(),
                self.tokens.len()
            )));
        }
        let strip = |s: &[u32]| s.iter().copied().filter(|&t| t != pad_id).collect::<Vec<_>>();
        let scores =
            references.iter().zip(&self.tokens).map(|(r, h)| RougeScores::compute(&strip(r), &strip(h))).collect();
        self.metrics = Some(scores);
        Ok(self.metrics.as_deref().unwrap_or_default())
    }

    pub fn mean_rouge(&self) -> Option<RougeScores> {
        self.metrics.as_ref().map(|m| RougeScores::mean(m))
    }
}
