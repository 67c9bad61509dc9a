//! Stein-type estimators of T = Σ_i c_i x_i^⊗3 from per-row gradients of
//! the randomly initialized Pooler rows.
//!
//! Accumulation over rows runs in fixed chunks of [`ESTIMATOR_CHUNK`]
//! grouped into at most [`GROUPS`] contiguous groups; groups may run in
//! parallel but are always reduced in index order, so results do not depend
//! on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::SymTensor3;
use crate::{Error, Result};

pub const ESTIMATOR_CHUNK: usize = 256;
const GROUPS: usize = 16;

fn check_rows(name: &'static str, rows: &DMatrix<f64>, w_rows: &DMatrix<f64>) -> Result<()> {
    if w_rows.nrows() == 0 {
        return Err(Error::Empty("random Pooler rows (m = 0)"));
    }
    if rows.nrows() != w_rows.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {} gradient rows for {} weight rows",
            rows.nrows(),
            w_rows.nrows()
        )));
    }
    if !rows.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    if !w_rows.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("random Pooler rows"));
    }
    Ok(())
}

/// Σ_j left_j ⊗ w_j ⊗ w_j, computed chunk-wise as (d × n)·(n × d²) products.
fn cubic_moment(left: &DMatrix<f64>, w_rows: &DMatrix<f64>) -> SymTensor3 {
    let (m, d) = w_rows.shape();
    let n_chunks = m.div_ceil(ESTIMATOR_CHUNK);
    let n_groups = n_chunks.min(GROUPS);
    let per_group = n_chunks.div_ceil(n_groups);

    let chunk_product = |start: usize, end: usize| -> DMatrix<f64> {
        let n = end - start;
        let l = left.rows(start, n).transpose();
        let mut kr = DMatrix::zeros(n, d * d);
        for j in 0..n {
            for b in 0..d {
                let wb = w_rows[(start + j, b)];
                for c in 0..d {
                    kr[(j, b * d + c)] = wb * w_rows[(start + j, c)];
                }
            }
        }
        l * kr
    };

    let partials: Vec<DMatrix<f64>> = (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let mut acc = DMatrix::zeros(d, d * d);
            let first = g * per_group;
            let last = ((g + 1) * per_group).min(n_chunks);
            for chunk in first..last {
                let start = chunk * ESTIMATOR_CHUNK;
                let end = (start + ESTIMATOR_CHUNK).min(m);
                acc += chunk_product(start, end);
            }
            acc
        })
        .collect();

    let mut total = DMatrix::zeros(d, d * d);
    for p in &partials {
        total += p;
    }
    SymTensor3::from_fn(d, |a, b, c| total[(a, b * d + c)])
}

fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Average of the three cyclic index rotations,
/// T̂(a,b,c) = (T₁(a,b,c) + T₁(c,a,b) + T₁(b,c,a)) / 3.
///
/// Each orbit is summed in sorted order so all rotations receive bit-identical
/// values; orbits whose entries already agree are left untouched.
pub fn symmetrize(raw: &SymTensor3) -> SymTensor3 {
    let d = raw.dim();
    SymTensor3::from_fn(d, |a, b, c| {
        let mut v = [raw.get(a, b, c), raw.get(c, a, b), raw.get(b, c, a)];
        if v[0] == v[1] && v[1] == v[2] {
            return v[0];
        }
        sorted_sum(&mut v) / 3.0
    })
}

/// Average over all six index permutations (same ordering rule as
/// [`symmetrize`]).
pub(crate) fn symmetrize_full(raw: &SymTensor3) -> SymTensor3 {
    let d = raw.dim();
    SymTensor3::from_fn(d, |a, b, c| {
        let mut v = [
            raw.get(a, b, c),
            raw.get(a, c, b),
            raw.get(b, a, c),
            raw.get(b, c, a),
            raw.get(c, a, b),
            raw.get(c, b, a),
        ];
        if v.iter().all(|&x| x == v[0]) {
            return v[0];
        }
        sorted_sum(&mut v) / 6.0
    })
}

/// Removes from each column of `rows` its least-squares fit on `[1, w_j]`.
///
/// Constant and linear functions of w are orthogonal to H₂ and H₃ under the
/// Gaussian measure, so the estimators keep their expectation (up to an
/// O(d′/m) fitting term) while losing the variance contributed by the
/// low-order part of the activation. For near-linear activations such as
/// SELU this is most of the variance.
pub fn low_order_residual(rows: &DMatrix<f64>, w_rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows("gradients", rows, w_rows)?;
    let (m, d) = w_rows.shape();
    if m <= d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need more than {} random rows to fit the low-order part, got {m}",
            d + 1
        )));
    }
    let mut x = DMatrix::from_element(m, d + 1, 1.0);
    x.view_mut((0, 1), (m, d)).copy_from(w_rows);
    let gram = x.tr_mul(&x);
    let rhs = x.tr_mul(rows);
    let chol = gram.cholesky().ok_or_else(|| Error::InvalidArgument("random rows are linearly dependent".into()))?;
    let coef = chol.solve(&rhs);
    Ok(rows - x * coef)
}

/// T̂ = (1/m) Σ_j g_j H₃(w_j) from scalar per-row gradients (squared-error
/// route, g_j = ∂L/∂a_j).
pub fn estimate_t_mse(g: &DVector<f64>, w_rows: &DMatrix<f64>) -> Result<SymTensor3> {
    let gm = DMatrix::from_column_slice(g.len(), 1, g.as_slice());
    check_rows("classifier gradients", &gm, w_rows)?;
    let (m, d) = w_rows.shape();
    let mut left = w_rows.clone();
    for j in 0..m {
        left.row_mut(j).scale_mut(g[j]);
    }
    let mut t = cubic_moment(&left, w_rows);
    // Σ_j g_j w_j, for the −w δ terms of H₃
    let v = w_rows.tr_mul(g);
    for a in 0..d {
        for b in 0..d {
            let x = t.get(a, b, b) - v[a];
            t.set(a, b, b, x);
            let x = t.get(a, b, a) - v[b];
            t.set(a, b, a, x);
            let x = t.get(a, a, b) - v[b];
            t.set(a, a, b, x);
        }
    }
    t.scale(1.0 / m as f64);
    Ok(symmetrize_full(&t))
}

/// Cross-entropy route: T₁ = Σ_j ĝ_j ⊗ H₂(w_j) with ĝ_j = ∇_{w_j}L, then
/// cyclic symmetrization. The 1/m factor is carried by the constant
/// classifier weights a_j = 1/m inside ĝ_j.
pub fn estimate_t_ce(grad_rows: &DMatrix<f64>, w_rows: &DMatrix<f64>) -> Result<SymTensor3> {
    check_rows("Pooler-row gradients", grad_rows, w_rows)?;
    if grad_rows.ncols() != w_rows.ncols() {
        return Err(Error::DimensionMismatch("gradient rows and weight rows differ in width".into()));
    }
    let d = w_rows.ncols();
    let mut t1 = cubic_moment(grad_rows, w_rows);
    let s: DVector<f64> = grad_rows.row_sum().transpose();
    for a in 0..d {
        for b in 0..d {
            let x = t1.get(a, b, b) - s[a];
            t1.set(a, b, b, x);
        }
    }
    Ok(symmetrize(&t1))
}

/// Fourth-order route for activations whose third-derivative expectation
/// vanishes: T̂ = (1/m) Σ_j g_j H₄(w_j)(I, I, I, u) for a unit vector `u`.
pub fn estimate_t_relu_h4(g: &DVector<f64>, w_rows: &DMatrix<f64>, u: &DVector<f64>) -> Result<SymTensor3> {
    let gm = DMatrix::from_column_slice(g.len(), 1, g.as_slice());
    check_rows("classifier gradients", &gm, w_rows)?;
    let (m, d) = w_rows.shape();
    if u.len() != d {
        return Err(Error::DimensionMismatch("contraction vector width".into()));
    }
    if (u.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("contraction vector must be unit norm, got {}", u.norm())));
    }
    let wu = w_rows * u;
    let gwu = g.component_mul(&wu);
    let mut left = w_rows.clone();
    for j in 0..m {
        left.row_mut(j).scale_mut(gwu[j]);
    }
    let cubic = cubic_moment(&left, w_rows);
    // S = Σ g_j w_j w_jᵀ, v = Σ g_j (w_j·u) w_j, s = Σ g_j
    let mut gw = w_rows.clone();
    for j in 0..m {
        gw.row_mut(j).scale_mut(g[j]);
    }
    let s_mat = gw.tr_mul(w_rows);
    let v = w_rows.tr_mul(&gwu);
    let s = g.sum();
    let dl = |i: usize, j: usize| (i == j) as u8 as f64;
    let mut t = SymTensor3::from_fn(d, |a, b, c| {
        cubic.get(a, b, c)
            - (s_mat[(a, b)] * u[c] + s_mat[(a, c)] * u[b] + s_mat[(b, c)] * u[a])
            - (v[a] * dl(b, c) + v[b] * dl(a, c) + v[c] * dl(a, b))
            + s * (dl(a, b) * u[c] + dl(a, c) * u[b] + dl(b, c) * u[a])
    });
    t.scale(1.0 / m as f64);
    Ok(symmetrize_full(&t))
}
