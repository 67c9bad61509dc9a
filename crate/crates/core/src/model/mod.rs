//! Hand-differentiated stand-in for a language-model classification head.
//!
//! The pipeline from token ids to loss is
//!
//! ```text
//! hbar_i   = mean_l (embed[t_il] + pos[l])          (pad tokens masked)
//! x_i      = tanh(enc_W · hbar_i)                   Pooler input, d
//! hidden_i = σ(W1 · x_i + b1)                       wide Pooler, |V|
//! logits_i = W2 · hidden_i                          classifier, N
//! ```
//!
//! Token and positional embeddings are frozen: their gradients are never
//! part of a [`GradientReport`].

mod activation;
mod forward;
mod inversion;

pub use activation::{Activation, SELU_ALPHA, SELU_LAMBDA};
pub use forward::{forward, param_gradients, ForwardPass};
pub use inversion::{
    embedding_gradients, grad_match_loss, FeatureTarget, GradMatchKind, InversionGradients, LossWeights,
};

pub(crate) use forward::{accumulate_example, encode, example_trace};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{Error, Result};

/// Hard cap on the recovered dimension; tensors are stored densely.
pub const MAX_RECOVERED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Half squared error against real-valued targets, averaged over the batch.
    Mse,
    /// Softmax cross-entropy, averaged over the batch.
    Ce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::InvalidArgument(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Shape of the attack-modified head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// |V|: vocabulary size, also the widened Pooler width.
    pub vocab_size: usize,
    pub d_emb: usize,
    /// Pooler input dimension.
    pub d: usize,
    pub n_classes: usize,
    /// Recovered sub-dimension d′; columns d′..d of the random rows are zero.
    pub d_rec: usize,
    pub max_len: usize,
}

impl HeadDims {
    pub fn new(
        vocab_size: usize,
        d_emb: usize,
        d: usize,
        n_classes: usize,
        d_rec: usize,
        max_len: usize,
    ) -> Result<Self> {
        let dims = HeadDims { vocab_size, d_emb, d, n_classes, d_rec, max_len };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_emb == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument("d, d_emb and max_len must be positive".into()));
        }
        if self.d_rec == 0 || self.d_rec > self.d {
            return Err(Error::InvalidArgument(format!(
                "recovered dimension {} must lie in 1..={}",
                self.d_rec, self.d
            )));
        }
        if self.d_rec > MAX_RECOVERED_DIM {
            return Err(Error::InvalidArgument(format!(
                "recovered dimension {} exceeds the dense-tensor cap {MAX_RECOVERED_DIM}",
                self.d_rec
            )));
        }
        if self.vocab_size <= self.d {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {} must exceed the Pooler input dimension {}",
                self.vocab_size, self.d
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("need at least one output".into()));
        }
        Ok(())
    }

    /// Number of randomly initialized Pooler rows, m = |V| − d.
    pub fn m(&self) -> usize {
        self.vocab_size - self.d
    }

    /// Total Pooler width, |V|.
    pub fn m_total(&self) -> usize {
        self.vocab_size
    }
}

/// Parameters of the head. `w1` rows `0..m` are the attacker's random rows,
/// rows `m..|V|` keep the original Pooler weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: HeadDims,
    pub embed: DMatrix<f64>,
    pub pos: DMatrix<f64>,
    pub enc_w: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub activation: Activation,
    pub loss: LossKind,
    embeddings_frozen: bool,
}

impl ModelParams {
    /// Assembles parameters from explicit matrices, checking every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dims: HeadDims,
        embed: DMatrix<f64>,
        pos: DMatrix<f64>,
        enc_w: DMatrix<f64>,
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        activation: Activation,
        loss: LossKind,
    ) -> Result<Self> {
        let params = ModelParams { dims, embed, pos, enc_w, w1, b1, w2, activation, loss, embeddings_frozen: true };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        d.validate()?;
        let m_total = d.m_total();
        let checks = [
            ("embed", self.embed.shape(), (d.vocab_size, d.d_emb)),
            ("pos", self.pos.shape(), (d.max_len, d.d_emb)),
            ("enc_w", self.enc_w.shape(), (d.d, d.d_emb)),
            ("w1", self.w1.shape(), (m_total, d.d)),
            ("w2", self.w2.shape(), (d.n_classes, m_total)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!("{name}: expected {want:?}, got {got:?}")));
            }
        }
        if self.b1.len() != m_total {
            return Err(Error::DimensionMismatch(format!("b1: expected {m_total}, got {}", self.b1.len())));
        }
        Ok(())
    }

    /// Token and positional embeddings never receive reported gradients.
    pub fn embeddings_frozen(&self) -> bool {
        self.embeddings_frozen
    }

    /// The attacker's random Pooler rows restricted to the recovered columns.
    pub fn random_rows(&self, d_rec: usize) -> DMatrix<f64> {
        self.w1.view((0, 0), (self.dims.m(), d_rec)).into_owned()
    }

    /// Embedding of a token sequence as an `L × d_emb` matrix.
    pub fn embed_tokens(&self, ids: &[u32]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(ids.len(), self.dims.d_emb);
        for (l, &id) in ids.iter().enumerate() {
            out.row_mut(l).copy_from(&self.embed.row(id as usize));
        }
        out
    }

    /// Population standard deviation of the token-embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let n = self.embed.len() as f64;
        let mean = self.embed.sum() / n;
        (self.embed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// A batch of token sequences with their supervision.
///
/// Sequences are stored unpadded; `pad_id` tokens, if present, are masked
/// out of the encoder mean and stripped before evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    /// Real-valued targets for MSE mode; one-hot labels are used when absent.
    pub targets: Option<Vec<Vec<f64>>>,
    pub pad_id: u32,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<u32>>, labels: Vec<usize>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if sequences.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} sequences but {} labels", sequences.len(), labels.len())));
        }
        Ok(Batch { sequences, labels, targets: None, pad_id: crate::data::PAD_ID })
    }

    pub fn with_targets(mut self, targets: Vec<Vec<f64>>) -> Result<Self> {
        if targets.len() != self.sequences.len() {
            return Err(Error::DimensionMismatch("one target row per example".into()));
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }

    /// Sequence `i` with padding removed.
    pub fn stripped(&self, i: usize) -> Vec<u32> {
        self.sequences[i].iter().copied().filter(|&t| t != self.pad_id).collect()
    }

    pub(crate) fn target_for(&self, i: usize, n_out: usize) -> Target {
        match &self.targets {
            Some(t) => Target::Real(DVector::from_column_slice(&t[i])),
            None => Target::Class(self.labels[i].min(n_out.saturating_sub(1))),
        }
    }
}

/// Supervision for one example.
#[derive(Debug, Clone)]
pub(crate) enum Target {
    Class(usize),
    Real(DVector<f64>),
}

/// The batch-averaged gradient a client reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub grad_w1: DMatrix<f64>,
    pub grad_b1: DVector<f64>,
    pub grad_w2: DMatrix<f64>,
    pub loss_kind: LossKind,
}

impl GradientReport {
    pub fn zeros(dims: &HeadDims, loss_kind: LossKind) -> Self {
        GradientReport {
            grad_w1: DMatrix::zeros(dims.m_total(), dims.d),
            grad_b1: DVector::zeros(dims.m_total()),
            grad_w2: DMatrix::zeros(dims.n_classes, dims.m_total()),
            loss_kind,
        }
    }

    fn blocks(&self) -> [&[f64]; 3] {
        [self.grad_w1.as_slice(), self.grad_b1.as_slice(), self.grad_w2.as_slice()]
    }

    /// All reported entries, block by block.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks().into_iter().flat_map(|b| b.iter().copied())
    }

    pub fn same_shape(&self, other: &GradientReport) -> bool {
        self.grad_w1.shape() == other.grad_w1.shape()
            && self.grad_b1.len() == other.grad_b1.len()
            && self.grad_w2.shape() == other.grad_w2.shape()
    }

    pub fn dot(&self, other: &GradientReport) -> f64 {
        self.grad_w1.dot(&other.grad_w1) + self.grad_b1.dot(&other.grad_b1) + self.grad_w2.dot(&other.grad_w2)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn scale(&mut self, s: f64) {
        self.grad_w1 *= s;
        self.grad_b1 *= s;
        self.grad_w2 *= s;
    }

    pub fn axpy(&mut self, a: f64, other: &GradientReport) {
        self.grad_w1 += &other.grad_w1 * a;
        self.grad_b1 += &other.grad_b1 * a;
        self.grad_w2 += &other.grad_w2 * a;
    }

    pub fn max_abs_diff(&self, other: &GradientReport) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn normal_matrix(rng: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Builds the attack-modified head.
///
/// * rows `0..m` of `W1` are i.i.d. N(0,1) in columns `0..d′` and zero in
///   `d′..d`; rows `m..|V|` hold the original Pooler weights;
/// * `b1 = 0`;
/// * classifier columns `0..m` are the constant `i/m` for class `i`, the
///   remaining columns keep the original classifier weights.
///
/// The "original" encoder, Pooler and classifier weights are themselves
/// drawn from `seed`, standing in for a fine-tuned checkpoint.
pub fn init_attack_head(dims: HeadDims, activation: Activation, loss: LossKind, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let (m, m_total, d) = (dims.m(), dims.m_total(), dims.d);

    let mut enc_rng = rng::stream(seed, streams::ENCODER);
    let embed = normal_matrix(&mut enc_rng, dims.vocab_size, dims.d_emb, 1.0);
    let pos = normal_matrix(&mut enc_rng, dims.max_len, dims.d_emb, 0.3);
    let enc_w = normal_matrix(&mut enc_rng, d, dims.d_emb, 1.0 / (dims.d_emb as f64).sqrt());

    let mut rand_rng = rng::stream(seed, streams::HEAD_RANDOM_ROWS);
    let mut orig_rng = rng::stream(seed, streams::HEAD_ORIGINAL);
    let orig_std = 1.0 / (d as f64).sqrt();

    let mut w1 = DMatrix::zeros(m_total, d);
    for j in 0..m {
        for c in 0..dims.d_rec {
            let z: f64 = StandardNormal.sample(&mut rand_rng);
            w1[(j, c)] = z;
        }
    }
    for j in m..m_total {
        for c in 0..d {
            let z: f64 = StandardNormal.sample(&mut orig_rng);
            w1[(j, c)] = z * orig_std;
        }
    }

    let mut w2 = DMatrix::zeros(dims.n_classes, m_total);
    for i in 0..dims.n_classes {
        for j in 0..m {
            w2[(i, j)] = i as f64 / m as f64;
        }
        for j in m..m_total {
            let z: f64 = StandardNormal.sample(&mut orig_rng);
            w2[(i, j)] = z * orig_std;
        }
    }

    ModelParams::from_parts(dims, embed, pos, enc_w, w1, DVector::zeros(m_total), w2, activation, loss)
}
