//! Recovery of Pooler-input directions from a gradient report, and
//! assignment of the recovered directions to batch slots.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{FeatureTarget, GradientReport, ModelParams};
use crate::rng::{self, streams};
use crate::tensor::{
    decompose_with, estimate_t_ce, estimate_t_mse, estimate_t_relu_h4, low_order_residual, DecomposeMethod,
    DecomposeOptions, SymTensor3,
};
use crate::{Error, Result};

/// Which gradients feed the tensor estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconPath {
    /// Classifier gradients g_j = ∂L/∂a_j with the third-order Hermite tensor.
    #[default]
    Mse,
    /// Pooler-row gradients ĝ_j = ∇_{w_j}L with the second-order Hermite
    /// matrix, cyclically symmetrized.
    Ce,
    /// Classifier gradients with the fourth-order Hermite tensor contracted
    /// along a random unit vector, for activations whose third-derivative
    /// expectation vanishes. Experimental.
    ReluH4,
}

impl std::str::FromStr for ReconPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(ReconPath::Mse),
            "ce" => Ok(ReconPath::Ce),
            "relu_h4" | "h4" => Ok(ReconPath::ReluH4),
            other => Err(Error::InvalidArgument(format!("unknown recovery path {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub d_rec: usize,
    pub path: ReconPath,
    pub method: DecomposeMethod,
    pub restarts: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Classifier row used by the scalar paths; the row with the largest
    /// gradient energy when unset.
    pub output_row: Option<usize>,
    /// Subtract the least-squares affine fit in w from the gradients before
    /// estimating. Leaves the expectation unchanged and cuts the variance.
    pub control_variate: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            d_rec: 100,
            path: ReconPath::Mse,
            method: DecomposeMethod::Jennrich,
            restarts: 4,
            batch_size: 1,
            seed: 0,
            output_row: None,
            control_variate: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.d_rec == 0 || self.d_rec > params.dims.d_rec {
            return Err(Error::InvalidArgument(format!(
                "recovered dimension {} must lie in 1..={} (the zeroed-column boundary of the head)",
                self.d_rec, params.dims.d_rec
            )));
        }
        if self.batch_size == 0 || self.batch_size > self.d_rec {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must lie in 1..={}",
                self.batch_size, self.d_rec
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("at least one decomposition attempt".into()));
        }
        Ok(())
    }
}

/// Unit feature directions with their matching to batch slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredFeatures {
    /// `B × d′`, unit rows, in decomposition order.
    pub directions: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Recovered index → batch slot. Identity until matched.
    pub permutation: Vec<usize>,
    /// Sign applied to each recovered direction, ±1.
    pub signs: Vec<f64>,
    /// |cos| with the reference, per recovered index (oracle matching only).
    pub quality: Option<Vec<f64>>,
    pub residual: f64,
    pub condition: f64,
    /// Recovered indices whose closest reference slot was already claimed
    /// by an earlier greedy step.
    pub contested: Vec<usize>,
}

impl RecoveredFeatures {
    pub fn new(directions: DMatrix<f64>, weights: Vec<f64>, residual: f64, condition: f64) -> Self {
        let b = directions.nrows();
        RecoveredFeatures {
            directions,
            weights,
            permutation: (0..b).collect(),
            signs: vec![1.0; b],
            quality: None,
            residual,
            condition,
            contested: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    /// Signed directions with row `s` holding the feature assigned to slot `s`.
    pub fn aligned(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.len(), self.dim());
        for (k, &s) in self.permutation.iter().enumerate() {
            out.row_mut(s).copy_from(&(self.directions.row(k) * self.signs[k]));
        }
        out
    }

    pub fn with_assignment(&self, a: &Assignment) -> Self {
        let mut out = self.clone();
        out.permutation = a.slot_of.clone();
        out.signs = a.signs.clone();
        out
    }

    /// Per-slot target directions for the feature-match loss.
    pub fn feature_target(&self) -> FeatureTarget {
        let aligned = self.aligned();
        FeatureTarget { d_rec: self.dim(), targets: (0..self.len()).map(|s| aligned.row(s).transpose()).collect() }
    }
}

/// One-to-one pairing of recovered features with batch slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Recovered index → slot.
    pub slot_of: Vec<usize>,
    pub signs: Vec<f64>,
    /// Σ |cos| over the chosen pairs.
    pub total: f64,
}

fn pick_output_row(grad_w2: &DMatrix<f64>, m: usize, requested: Option<usize>) -> Result<usize> {
    let n = grad_w2.nrows();
    if let Some(r) = requested {
        return if r < n { Ok(r) } else { Err(Error::InvalidArgument(format!("output row {r} >= {n} outputs"))) };
    }
    let energy = |i: usize| grad_w2.view((i, 0), (1, m)).norm_squared();
    Ok((0..n).fold(0, |best, i| if energy(i) > energy(best) { i } else { best }))
}

/// Builds the tensor estimate for `cfg.path`.
pub fn estimate_tensor(report: &GradientReport, params: &ModelParams, cfg: &ReconConfig) -> Result<SymTensor3> {
    cfg.validate(params)?;
    if !report.same_shape(&GradientReport::zeros(&params.dims, report.loss_kind)) {
        return Err(Error::DimensionMismatch("gradient report does not match the head".into()));
    }
    if !report.is_finite() {
        return Err(Error::NonFinite("gradient report"));
    }
    let m = params.dims.m();
    let w = params.random_rows(cfg.d_rec);
    let scalar_gradients = || -> Result<DVector<f64>> {
        let row = pick_output_row(&report.grad_w2, m, cfg.output_row)?;
        let g = DVector::from_iterator(m, report.grad_w2.view((row, 0), (1, m)).iter().copied());
        if cfg.control_variate {
            let col = DMatrix::from_column_slice(m, 1, g.as_slice());
            Ok(low_order_residual(&col, &w)?.column(0).into_owned())
        } else {
            Ok(g)
        }
    };
    match cfg.path {
        ReconPath::Mse => estimate_t_mse(&scalar_gradients()?, &w),
        ReconPath::Ce => {
            let g = report.grad_w1.view((0, 0), (m, cfg.d_rec)).into_owned();
            let g = if cfg.control_variate { low_order_residual(&g, &w)? } else { g };
            estimate_t_ce(&g, &w)
        }
        ReconPath::ReluH4 => {
            let mut rng = rng::stream(cfg.seed, streams::RECON);
            let u = DVector::from_fn(cfg.d_rec, |_, _| StandardNormal.sample(&mut rng));
            let u = u.normalize();
            estimate_t_relu_h4(&scalar_gradients()?, &w, &u)
        }
    }
}

/// Estimates T from the report and decomposes it at rank B. The result is
/// unordered: identity permutation, positive signs.
pub fn recover_features(report: &GradientReport, params: &ModelParams, cfg: &ReconConfig) -> Result<RecoveredFeatures> {
    let t = estimate_tensor(report, params, cfg)?;
    let opts = DecomposeOptions { restarts: cfg.restarts, ..DecomposeOptions::default() };
    let dec = decompose_with(&t, cfg.batch_size, cfg.method, cfg.seed, &opts)?;
    Ok(RecoveredFeatures::new(dec.components, dec.weights, dec.residual, dec.condition))
}

fn cosine_matrix(rec: &DMatrix<f64>, other: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rec.shape() != other.shape() {
        return Err(Error::DimensionMismatch(format!("recovered {:?} vs comparison {:?}", rec.shape(), other.shape())));
    }
    let b = rec.nrows();
    Ok(DMatrix::from_fn(b, b, |k, s| {
        let x = rec.row(k);
        let y = other.row(s);
        let n = x.norm() * y.norm();
        if n == 0.0 {
            0.0
        } else {
            x.dot(&y) / n
        }
    }))
}

fn sign_of(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Greedy one-to-one matching against the true Pooler inputs: repeatedly
/// take the unassigned (feature, slot) pair with the largest |cos|, ties to
/// the lowest feature then slot index. Signs make every matched cosine
/// non-negative.
pub fn match_oracle(rec: &RecoveredFeatures, reference: &DMatrix<f64>) -> Result<RecoveredFeatures> {
    let cos = cosine_matrix(&rec.directions, reference)?;
    let b = cos.nrows();
    let mut slot_of = vec![usize::MAX; b];
    let mut taken = vec![false; b];
    let mut contested = Vec::new();
    for _ in 0..b {
        let mut best: Option<(usize, usize, f64)> = None;
        for k in (0..b).filter(|&k| slot_of[k] == usize::MAX) {
            for s in (0..b).filter(|&s| !taken[s]) {
                let v = cos[(k, s)].abs();
                if best.is_none_or(|(_, _, bv)| v > bv) {
                    best = Some((k, s, v));
                }
            }
        }
        let (k, s, _) = best.expect("an unassigned pair remains");
        let first_choice = (0..b).fold(0, |a, t| if cos[(k, t)].abs() > cos[(k, a)].abs() { t } else { a });
        if taken[first_choice] {
            contested.push(k);
        }
        slot_of[k] = s;
        taken[s] = true;
    }
    let signs: Vec<f64> = (0..b).map(|k| sign_of(cos[(k, slot_of[k])])).collect();
    let quality = (0..b).map(|k| cos[(k, slot_of[k])].abs()).collect();
    contested.sort_unstable();
    let mut out = rec.clone();
    out.permutation = slot_of;
    out.signs = signs;
    out.quality = Some(quality);
    out.contested = contested;
    Ok(out)
}

/// Oracle-free matching against the optimizer's current Pooler inputs:
/// the assignment maximizing Σ|cos| (exhaustive for B ≤ 8, Hungarian
/// beyond), with per-pair signs.
pub fn match_blind(rec: &RecoveredFeatures, current_guess: &DMatrix<f64>) -> Result<Assignment> {
    let cos = cosine_matrix(&rec.directions, current_guess)?;
    let abs = cos.abs();
    let slot_of = optimal_assignment(&abs);
    let signs = slot_of.iter().enumerate().map(|(k, &s)| sign_of(cos[(k, s)])).collect();
    let total = slot_of.iter().enumerate().map(|(k, &s)| abs[(k, s)]).sum();
    Ok(Assignment { slot_of, signs, total })
}

/// Row → column assignment maximizing the summed score of a square matrix.
/// Exhaustive (first maximum in lexicographic order) up to 8 rows.
pub fn optimal_assignment(score: &DMatrix<f64>) -> Vec<usize> {
    let n = score.nrows();
    assert_eq!(n, score.ncols(), "assignment needs a square score matrix");
    if n <= 8 {
        exhaustive_assignment(score)
    } else {
        hungarian_max(score)
    }
}

fn exhaustive_assignment(score: &DMatrix<f64>) -> Vec<usize> {
    let n = score.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(k, &s)| score[(k, s)]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_total = total(&perm);
    while next_permutation(&mut perm) {
        let t = total(&perm);
        if t > best_total {
            best_total = t;
            best.copy_from_slice(&perm);
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Kuhn–Munkres with potentials on the cost `max − score`.
fn hungarian_max(score: &DMatrix<f64>) -> Vec<usize> {
    let n = score.nrows();
    let top = score.max();
    let cost = |i: usize, j: usize| top - score[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut slot_of = vec![0; n];
    for j in 1..=n {
        slot_of[p[j] - 1] = j - 1;
    }
    slot_of
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_attack_head, param_gradients, Activation, HeadDims, LossKind};

    fn rec_from(rows: &[&[f64]]) -> RecoveredFeatures {
        let b = rows.len();
        let d = rows[0].len();
        let m = DMatrix::from_fn(b, d, |i, j| rows[i][j]);
        RecoveredFeatures::new(m, vec![1.0; b], 0.0, 1.0)
    }

    #[test]
    fn oracle_single_feature_keeps_identity() {
        let rec = rec_from(&[&[0.6, 0.8]]);
        let r = match_oracle(&rec, &DMatrix::from_row_slice(1, 2, &[-3.0, -4.0])).unwrap();
        assert_eq!(r.permutation, vec![0]);
        assert_eq!(r.signs, vec![-1.0]);
        assert!((r.quality.unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_detects_swap() {
        let rec = rec_from(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let reference = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let r = match_oracle(&rec, &reference).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert!(r.quality.as_ref().unwrap().iter().all(|&q| q == 1.0));
        assert_eq!(r.aligned(), reference);
        // matching twice is a no-op
        assert_eq!(match_oracle(&r, &reference).unwrap(), r);
    }

    #[test]
    fn blind_examples() {
        let rec = rec_from(&[&[1.0, 0.2], &[-0.1, 1.0]]);
        let a = match_blind(&rec, &rec.directions).unwrap();
        assert_eq!(a.slot_of, vec![0, 1]);
        assert!((a.total - 2.0).abs() < 1e-12);
        let mut rev = rec.directions.clone();
        rev.swap_rows(0, 1);
        assert_eq!(match_blind(&rec, &rev).unwrap().slot_of, vec![1, 0]);
    }

    #[test]
    fn hungarian_agrees_with_enumeration() {
        let mut rng = rng::stream(3, 0);
        for n in 1..=7 {
            for _ in 0..20 {
                let s = DMatrix::from_fn(n, n, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z.abs()
                });
                let a = exhaustive_assignment(&s);
                let h = hungarian_max(&s);
                let tot = |p: &[usize]| p.iter().enumerate().map(|(k, &j)| s[(k, j)]).sum::<f64>();
                assert!((tot(&a) - tot(&h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_report_fails_to_decompose() {
        let dims = HeadDims::new(300, 8, 16, 2, 8, 4).unwrap();
        let params = init_attack_head(dims, Activation::Selu, LossKind::Mse, 0).unwrap();
        let report = GradientReport::zeros(&dims, LossKind::Mse);
        let cfg = ReconConfig { d_rec: 8, ..ReconConfig::default() };
        assert!(matches!(recover_features(&report, &params, &cfg), Err(Error::Decomposition { .. })));
    }

    #[test]
    fn single_example_recovered_on_small_head() {
        let dims = HeadDims::new(6000, 8, 16, 2, 6, 4).unwrap();
        let params = init_attack_head(dims, Activation::CubeSquare, LossKind::Mse, 1).unwrap();
        let batch = crate::data::synth_batch(6000, 1, 3..=4, 2, 5, false).unwrap();
        let report = param_gradients(&params, &batch).unwrap();
        let cfg = ReconConfig { d_rec: 6, ..ReconConfig::default() };
        let rec = recover_features(&report, &params, &cfg).unwrap();
        let truth = crate::model::forward(&params, &batch).unwrap().pooler_in.columns(0, 6).into_owned();
        let q = match_oracle(&rec, &truth).unwrap().quality.unwrap()[0];
        assert!(q > 0.95, "quality {q}");
    }

    #[test]
    fn config_bounds() {
        let dims = HeadDims::new(40, 4, 8, 2, 4, 4).unwrap();
        let params = init_attack_head(dims, Activation::Selu, LossKind::Mse, 0).unwrap();
        let bad = [
            ReconConfig { d_rec: 5, ..ReconConfig::default() },
            ReconConfig { d_rec: 4, batch_size: 5, ..ReconConfig::default() },
            ReconConfig { d_rec: 4, restarts: 0, ..ReconConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate(&params).is_err());
        }
    }
}
