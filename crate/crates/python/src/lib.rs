//! Python bindings: vocabulary, the attack head, gradient reports, feature
//! recovery, the n-gram prior, the text-recovery search and ROUGE.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ::poolerleak::attack::run_attack;
use ::poolerleak::data::{bundled, tsv_texts};
use ::poolerleak::model::{forward, init_attack_head, param_gradients};
use ::poolerleak::recon::{match_oracle, recover_features};
use ::poolerleak::{
    Activation, AttackConfig, AttackResult, Batch, DecomposeMethod, FeaturePhase, GradientReport, HeadDims, LossKind,
    ModelParams, NgramModel, ReconConfig, ReconPath, RecoveredFeatures, RougeScores, Vocab,
};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Bundled corpus text: "toy_short", "toy_medium", "toy_long" or "toy_prior".
#[pyfunction]
fn bundled_text(name: &str) -> PyResult<&'static str> {
    match name {
        "toy_short" => Ok(bundled::TOY_SHORT),
        "toy_medium" => Ok(bundled::TOY_MEDIUM),
        "toy_long" => Ok(bundled::TOY_LONG),
        "toy_prior" => Ok(bundled::TOY_PRIOR),
        other => Err(PyValueError::new_err(format!("no bundled corpus {other:?}"))),
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F-scores of two token lists.
#[pyfunction]
fn rouge(reference: Vec<String>, hypothesis: Vec<String>) -> (f64, f64, f64) {
    let s = RougeScores::compute(&reference, &hypothesis);
    (s.r1, s.r2, s.r_l)
}

#[pyclass(name = "Vocab", module = "poolerleak", frozen)]
struct PyVocab(Vocab);

#[pymethods]
impl PyVocab {
    #[new]
    #[pyo3(signature = (lines, max_size = 4096))]
    fn new(lines: Vec<String>, max_size: usize) -> PyResult<Self> {
        Vocab::build(&lines, max_size).map(PyVocab).map_err(err)
    }

    /// Vocabulary over the bundled prior corpus and a bundled dataset.
    #[staticmethod]
    #[pyo3(signature = (dataset = "toy_short", max_size = 512))]
    fn bundled(dataset: &str, max_size: usize) -> PyResult<Self> {
        let mut lines: Vec<String> = bundled::TOY_PRIOR.lines().map(str::to_string).collect();
        lines.extend(tsv_texts(bundled_text(dataset)?));
        Self::new(lines, max_size)
    }

    fn tokenize(&self, line: &str) -> Vec<u32> {
        self.0.tokenize(line)
    }

    fn detokenize(&self, ids: Vec<u32>) -> String {
        self.0.detokenize(&ids)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.0.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.0.token(id).map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Attack-modified classification head.
#[pyclass(name = "Head", module = "poolerleak", frozen)]
struct PyHead(ModelParams);

fn batch(sequences: Vec<Vec<u32>>, labels: Vec<usize>) -> PyResult<Batch> {
    Batch::new(sequences, labels).map_err(err)
}

#[pymethods]
impl PyHead {
    #[new]
    #[pyo3(signature = (vocab_size, d_emb, d, n_classes, d_rec, max_len, activation = "selu", loss = "ce", seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_emb: usize,
        d: usize,
        n_classes: usize,
        d_rec: usize,
        max_len: usize,
        activation: &str,
        loss: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let dims = HeadDims::new(vocab_size, d_emb, d, n_classes, d_rec, max_len).map_err(err)?;
        let act: Activation = activation.parse().map_err(err)?;
        let loss: LossKind = loss.parse().map_err(err)?;
        init_attack_head(dims, act, loss, seed).map(PyHead).map_err(err)
    }

    /// Batch-averaged parameter gradient a client would report.
    fn gradients(&self, py: Python<'_>, sequences: Vec<Vec<u32>>, labels: Vec<usize>) -> PyResult<PyGradientReport> {
        let b = batch(sequences, labels)?;
        py.detach(|| param_gradients(&self.0, &b)).map(PyGradientReport).map_err(err)
    }

    /// Pooler inputs, one row per example.
    fn pooler_inputs(&self, sequences: Vec<Vec<u32>>, labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let b = batch(sequences, labels)?;
        forward(&self.0, &b).map(|f| rows(&f.pooler_in)).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.dims.vocab_size
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.dims.d
    }

    #[getter]
    fn d_rec(&self) -> usize {
        self.0.dims.d_rec
    }

    /// Number of random Pooler rows used by the estimators.
    #[getter]
    fn m(&self) -> usize {
        self.0.dims.m()
    }
}

#[pyclass(name = "GradientReport", module = "poolerleak", frozen)]
struct PyGradientReport(GradientReport);

#[pymethods]
impl PyGradientReport {
    fn norm(&self) -> f64 {
        self.0.norm()
    }

    #[getter]
    fn grad_w2(&self) -> Vec<Vec<f64>> {
        rows(&self.0.grad_w2)
    }

    #[getter]
    fn grad_b1(&self) -> Vec<f64> {
        self.0.grad_b1.iter().copied().collect()
    }
}

#[pyclass(name = "RecoveredFeatures", module = "poolerleak", frozen)]
struct PyFeatures(RecoveredFeatures);

#[pymethods]
impl PyFeatures {
    /// Unit directions, one row per recovered feature.
    #[getter]
    fn directions(&self) -> Vec<Vec<f64>> {
        rows(&self.0.directions)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    #[getter]
    fn permutation(&self) -> Vec<usize> {
        self.0.permutation.clone()
    }

    #[getter]
    fn signs(&self) -> Vec<f64> {
        self.0.signs.clone()
    }

    /// Per-feature |cos| with the reference after `match_oracle`.
    #[getter]
    fn quality(&self) -> Option<Vec<f64>> {
        self.0.quality.clone()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.0.residual
    }

    #[getter]
    fn condition(&self) -> f64 {
        self.0.condition
    }

    /// Features whose greedy match was not a clear winner.
    #[getter]
    fn contested(&self) -> Vec<usize> {
        self.0.contested.clone()
    }

    /// Order and signs fixed against reference rows (`B × d′`, the first d′
    /// columns of `Head.pooler_inputs`).
    fn match_oracle(&self, reference: Vec<Vec<f64>>) -> PyResult<Self> {
        match_oracle(&self.0, &matrix(&reference)?).map(PyFeatures).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (report, head, d_rec, batch_size, path = "mse", method = "jennrich", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn recover(
    py: Python<'_>,
    report: PyRef<'_, PyGradientReport>,
    head: PyRef<'_, PyHead>,
    d_rec: usize,
    batch_size: usize,
    path: &str,
    method: &str,
    seed: u64,
) -> PyResult<PyFeatures> {
    let path: ReconPath = path.parse().map_err(err)?;
    let method: DecomposeMethod = method.parse().map_err(err)?;
    let cfg = ReconConfig { d_rec, path, method, batch_size, seed, ..ReconConfig::default() };
    let (r, h) = (&report.0, &head.0);
    py.detach(|| recover_features(r, h, &cfg)).map(PyFeatures).map_err(err)
}

#[pyclass(name = "NgramModel", module = "poolerleak", frozen)]
struct PyNgram(NgramModel);

#[pymethods]
impl PyNgram {
    #[new]
    #[pyo3(signature = (corpus, vocab_size, n = 2, k = 0.1))]
    fn new(corpus: Vec<Vec<u32>>, vocab_size: usize, n: usize, k: f64) -> PyResult<Self> {
        NgramModel::train(&corpus, vocab_size, n, k).map(PyNgram).map_err(err)
    }

    fn prob(&self, context: Vec<u32>, token: u32) -> f64 {
        self.0.prob(&context, token)
    }

    fn log_perplexity(&self, sequence: Vec<u32>) -> PyResult<f64> {
        self.0.log_perplexity(&sequence).map_err(err)
    }
}

#[pyclass(name = "AttackResult", module = "poolerleak", frozen)]
struct PyAttackResult(AttackResult);

#[pymethods]
impl PyAttackResult {
    /// Recovered token ids per batch slot.
    #[getter]
    fn tokens(&self) -> Vec<Vec<u32>> {
        self.0.tokens.clone()
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.losses.score
    }

    #[getter]
    fn grad_match(&self) -> f64 {
        self.0.losses.grad_match
    }

    #[getter]
    fn feature_match(&self) -> Option<f64> {
        self.0.losses.feature_match
    }

    #[getter]
    fn best_init(&self) -> usize {
        self.0.best_init
    }

    /// Per-example (R-1, R-2, R-L) against reference token ids.
    fn rouge(&self, references: Vec<Vec<u32>>) -> PyResult<Vec<(f64, f64, f64)>> {
        let mut res = self.0.clone();
        let scores = res.evaluate(&references, ::poolerleak::data::PAD_ID).map_err(err)?;
        Ok(scores.iter().map(|s| (s.r1, s.r2, s.r_l)).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(err)
    }
}

/// Default search settings as JSON, a starting point for `config_json`.
#[pyfunction]
fn default_attack_config() -> PyResult<String> {
    serde_json::to_string_pretty(&AttackConfig::default()).map_err(err)
}

/// Text-recovery search. `config_json` overrides the default settings;
/// `feature_phase` and `seed` override the config.
#[pyfunction]
#[pyo3(signature = (report, head, lengths, labels, features = None, prior = None, feature_phase = "none", seed = 0, config_json = None))]
#[allow(clippy::too_many_arguments)]
fn attack(
    py: Python<'_>,
    report: PyRef<'_, PyGradientReport>,
    head: PyRef<'_, PyHead>,
    lengths: Vec<usize>,
    labels: Vec<usize>,
    features: Option<PyRef<'_, PyFeatures>>,
    prior: Option<PyRef<'_, PyNgram>>,
    feature_phase: &str,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<PyAttackResult> {
    let base: AttackConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => AttackConfig::default(),
    };
    let phase: FeaturePhase = feature_phase.parse().map_err(err)?;
    let cfg = base.with_phase(phase).with_seed(seed);
    let (r, h) = (&report.0, &head.0);
    let f = features.as_ref().map(|f| &f.0);
    let p = prior.as_ref().map(|p| &p.0);
    py.detach(|| run_attack(r, h, &lengths, &labels, f, p, &cfg)).map(PyAttackResult).map_err(err)
}

#[pymodule]
mod poolerleak {
    #[pymodule_export]
    use super::{
        attack, bundled_text, default_attack_config, recover, rouge, PyAttackResult, PyFeatures, PyGradientReport,
        PyHead, PyNgram, PyVocab,
    };
}
