//! Rank-B symmetric CP decomposition of an order-3 tensor.
//!
//! Two routes are provided. Jennrich's simultaneous diagonalization handles
//! non-orthogonal components and signed weights directly and is the
//! default; symmetric power iteration with deflation is kept as an
//! independent cross-check. Both finish with the same back-fitting
//! refinement and least-squares weight fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SymTensor3;
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecomposeMethod {
    #[default]
    Jennrich,
    PowerDeflation,
}

impl std::str::FromStr for DecomposeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jennrich" => Ok(DecomposeMethod::Jennrich),
            "power" | "power_deflation" => Ok(DecomposeMethod::PowerDeflation),
            other => Err(Error::InvalidArgument(format!("unknown decomposition method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    /// Independent attempts (random contraction pairs or random power
    /// starts); the lowest-residual attempt wins, ties to the lowest index.
    pub restarts: usize,
    /// Random starts per component inside one power-deflation attempt.
    pub inner_starts: usize,
    pub max_iter: usize,
    pub refine_sweeps: usize,
    pub tol: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions { restarts: 4, inner_starts: 4, max_iter: 200, refine_sweeps: 60, tol: 1e-13 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `B × d′`, unit rows.
    pub components: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// ‖T − Σ c_i x_i^⊗3‖_F / ‖T‖_F.
    pub residual: f64,
    /// Ratio of the first to the B-th singular value of the mode-1 unfolding.
    pub condition: f64,
}

impl Decomposition {
    pub fn rank(&self) -> usize {
        self.components.nrows()
    }

    pub fn reconstruct(&self) -> SymTensor3 {
        SymTensor3::from_components(&self.weights, &self.components)
    }
}

/// Directions, weights and relative residual of one restart.
type Attempt = (DMatrix<f64>, Vec<f64>, f64);

pub fn decompose(t: &SymTensor3, rank: usize, method: DecomposeMethod, seed: u64) -> Result<Decomposition> {
    decompose_with(t, rank, method, seed, &DecomposeOptions::default())
}

pub fn decompose_with(
    t: &SymTensor3,
    rank: usize,
    method: DecomposeMethod,
    seed: u64,
    opts: &DecomposeOptions,
) -> Result<Decomposition> {
    let d = t.dim();
    if rank == 0 || rank > d {
        return Err(Error::InvalidArgument(format!("rank {rank} must lie in 1..={d}")));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor"));
    }
    let norm = t.frobenius_norm();
    let (basis, condition) = principal_subspace(t, rank);
    if norm == 0.0 {
        return Err(Error::Decomposition {
            reason: "zero tensor has no rank structure".into(),
            residual: f64::NAN,
            condition,
        });
    }

    let attempts: Vec<Option<Attempt>> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, (streams::DECOMPOSE << 16) | k as u64);
            let init = match method {
                DecomposeMethod::Jennrich => jennrich_attempt(t, &basis, &mut rng)?,
                DecomposeMethod::PowerDeflation => power_attempt(t, rank, opts, &mut rng),
            };
            let (x, c) = refine(t, init, opts);
            let r = residual(t, &x, &c, norm);
            r.is_finite().then_some((x, c, r))
        })
        .collect();

    let best = attempts.into_iter().flatten().reduce(|best, cand| if cand.2 < best.2 { cand } else { best });

    match best {
        Some((x, c, r)) => {
            let (components, weights) = canonicalize(x, c);
            Ok(Decomposition { components, weights, residual: r, condition })
        }
        None => Err(Error::Decomposition {
            reason: format!("degenerate contraction in all {} attempts", opts.restarts.max(1)),
            residual: f64::NAN,
            condition,
        }),
    }
}

/// Leading `rank` left singular vectors of the mode-1 unfolding and the
/// singular-value ratio σ₁/σ_B.
fn principal_subspace(t: &SymTensor3, rank: usize) -> (DMatrix<f64>, f64) {
    let unf = t.unfold();
    let gram = &unf * unf.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let d = t.dim();
    let mut basis = DMatrix::zeros(d, rank);
    for (k, &i) in order.iter().take(rank).enumerate() {
        basis.set_column(k, &eig.eigenvectors.column(i));
    }
    let top = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let last = eig.eigenvalues[order[rank - 1]].max(0.0).sqrt();
    let condition = if last > 0.0 { top / last } else { f64::INFINITY };
    (basis, condition)
}

fn random_vector(n: usize, rng: &mut rng::Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn random_unit(n: usize, rng: &mut rng::Rng) -> DVector<f64> {
    loop {
        let v = random_vector(n, rng);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// One simultaneous-diagonalization attempt inside the principal subspace.
/// Returns `None` when the random contraction is degenerate.
fn jennrich_attempt(t: &SymTensor3, basis: &DMatrix<f64>, rng: &mut rng::Rng) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let r = basis.ncols();
    let reduced = t.multilinear(basis);
    let a = random_vector(r, rng);
    let b = random_vector(r, rng);
    let ma = reduced.contract_last(&a);
    let mb = reduced.contract_last(&b);

    let sv = mb.clone().singular_values();
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if !(smax > 0.0) || smin / smax < 1e-12 {
        return None;
    }
    let k = &ma * mb.try_inverse()?;
    let eigenvalues = k.clone().complex_eigenvalues();

    let mut x = DMatrix::zeros(r, t.dim());
    for (row, lambda) in eigenvalues.iter().enumerate() {
        let shifted = &k - DMatrix::identity(r, r) * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let (imin, _) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let v = v_t.row(imin).transpose();
        let full = basis * v;
        let n = full.norm();
        if !(n > 0.0) {
            return None;
        }
        x.set_row(row, &(full / n).transpose());
    }
    let c = fit_weights(t, &x);
    Some((x, c))
}

fn power_attempt(t: &SymTensor3, rank: usize, opts: &DecomposeOptions, rng: &mut rng::Rng) -> (DMatrix<f64>, Vec<f64>) {
    let d = t.dim();
    let mut work = t.clone();
    let mut x = DMatrix::zeros(rank, d);
    for k in 0..rank {
        let mut best: Option<(DVector<f64>, f64)> = None;
        for _ in 0..opts.inner_starts.max(1) {
            let mut v = random_unit(d, rng);
            for _ in 0..opts.max_iter {
                let next = work.contract_two(&v, &v);
                let n = next.norm();
                if !(n > 0.0) {
                    break;
                }
                let next = next / n;
                let change = 1.0 - next.dot(&v).abs();
                v = next;
                if change < opts.tol {
                    break;
                }
            }
            let lambda = work.contract_all(&v);
            if best.as_ref().is_none_or(|(_, l)| lambda.abs() > l.abs()) {
                best = Some((v, lambda));
            }
        }
        let (v, lambda) = best.expect("at least one start");
        work.add_rank1(-lambda, &v);
        x.set_row(k, &v.transpose());
    }
    let c = fit_weights(t, &x);
    (x, c)
}

/// Least-squares weights for fixed unit components: solve
/// Σ_j (x_i·x_j)³ c_j = T(x_i, x_i, x_i).
fn fit_weights(t: &SymTensor3, x: &DMatrix<f64>) -> Vec<f64> {
    let r = x.nrows();
    let rows: Vec<DVector<f64>> = (0..r).map(|i| x.row(i).transpose()).collect();
    let gram = DMatrix::from_fn(r, r, |i, j| rows[i].dot(&rows[j]).powi(3));
    let rhs = DVector::from_iterator(r, rows.iter().map(|v| t.contract_all(v)));
    match gram.svd(true, true).solve(&rhs, 1e-12) {
        Ok(c) => c.iter().copied().collect(),
        Err(_) => rhs.iter().copied().collect(),
    }
}

/// Block-coordinate refinement: each component is moved to the fixed point
/// of x ∝ R_k(I, x, x), where R_k removes the other components, followed by
/// a joint weight fit. Returns whichever of input and output fits better.
fn refine(t: &SymTensor3, init: (DMatrix<f64>, Vec<f64>), opts: &DecomposeOptions) -> (DMatrix<f64>, Vec<f64>) {
    let norm = t.frobenius_norm();
    let start_res = residual(t, &init.0, &init.1, norm);
    let (mut x, mut c) = init.clone();
    let r = x.nrows();
    for _ in 0..opts.refine_sweeps {
        let mut moved = 0.0f64;
        for k in 0..r {
            let xk = x.row(k).transpose();
            let mut v = t.contract_two(&xk, &xk);
            for l in (0..r).filter(|&l| l != k) {
                let xl = x.row(l).transpose();
                let dot = xl.dot(&xk);
                v.axpy(-c[l] * dot * dot, &xl, 1.0);
            }
            let n = v.norm();
            if !(n > 0.0) || !n.is_finite() {
                continue;
            }
            let v = v / n;
            moved = moved.max(1.0 - v.dot(&xk).abs());
            x.set_row(k, &v.transpose());
        }
        c = fit_weights(t, &x);
        if moved < opts.tol {
            break;
        }
    }
    let end_res = residual(t, &x, &c, norm);
    if end_res.is_finite() && end_res <= start_res || !start_res.is_finite() {
        (x, c)
    } else {
        init
    }
}

fn residual(t: &SymTensor3, x: &DMatrix<f64>, c: &[f64], norm: f64) -> f64 {
    let mut rec = t.clone();
    for (k, &w) in c.iter().enumerate() {
        rec.add_rank1(-w, &x.row(k).transpose());
    }
    rec.frobenius_norm() / norm
}

/// Flips each (x, c) pair so the largest-magnitude coordinate of x is
/// positive, then orders components by decreasing |c|.
fn canonicalize(x: DMatrix<f64>, c: Vec<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let r = x.nrows();
    let mut items: Vec<(DVector<f64>, f64)> = (0..r)
        .map(|k| {
            let v = x.row(k).transpose();
            let imax = v.iamax();
            if v[imax] < 0.0 {
                (-v, -c[k])
            } else {
                (v, c[k])
            }
        })
        .collect();
    items.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    let mut comps = DMatrix::zeros(r, x.ncols());
    let mut weights = Vec::with_capacity(r);
    for (k, (v, w)) in items.into_iter().enumerate() {
        comps.set_row(k, &v.transpose());
        weights.push(w);
    }
    (comps, weights)
}
