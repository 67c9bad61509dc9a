//! Hermite tensors, Stein-type moment estimators and symmetric order-3
//! tensor decomposition.

mod decompose;
mod estimate;
mod hermite;

pub use decompose::{decompose, decompose_with, DecomposeMethod, DecomposeOptions, Decomposition};
pub use estimate::{
    estimate_t_ce, estimate_t_mse, estimate_t_relu_h4, low_order_residual, symmetrize, ESTIMATOR_CHUNK,
};
pub use hermite::{hermite2, hermite3, hermite4_contract};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Dense order-3 tensor of side `dim`, stored row-major as `(a·dim + b)·dim + c`.
///
/// Holds both raw (unsymmetrized) accumulations and symmetric tensors; the
/// estimators in this module always return symmetric ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl SymTensor3 {
    pub fn zeros(dim: usize) -> Self {
        SymTensor3 { dim, data: vec![0.0; dim * dim * dim] }
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for side {dim}, got {}",
                dim * dim * dim,
                data.len()
            )));
        }
        Ok(SymTensor3 { dim, data })
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for a in 0..dim {
            for b in 0..dim {
                for c in 0..dim {
                    t.data[(a * dim + b) * dim + c] = f(a, b, c);
                }
            }
        }
        t
    }

    /// Σ_i weights[i] · x_i^⊗3 for the rows of `components`.
    pub fn from_components(weights: &[f64], components: &DMatrix<f64>) -> Self {
        let mut t = Self::zeros(components.ncols());
        for (k, &w) in weights.iter().enumerate() {
            t.add_rank1(w, &components.row(k).transpose());
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dim + b) * self.dim + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        self.data[(a * self.dim + b) * self.dim + c] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn axpy(&mut self, s: f64, other: &SymTensor3) {
        for (v, o) in self.data.iter_mut().zip(&other.data) {
            *v += s * o;
        }
    }

    pub fn sub(&self, other: &SymTensor3) -> SymTensor3 {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Adds `w · x^⊗3`.
    pub fn add_rank1(&mut self, w: f64, x: &DVector<f64>) {
        let d = self.dim;
        for a in 0..d {
            let wa = w * x[a];
            for b in 0..d {
                let wab = wa * x[b];
                let row = &mut self.data[(a * d + b) * d..(a * d + b + 1) * d];
                for (c, v) in row.iter_mut().enumerate() {
                    *v += wab * x[c];
                }
            }
        }
    }

    /// T(I, I, v): contraction of the last index.
    pub fn contract_last(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |a, b| {
            let row = &self.data[(a * d + b) * d..(a * d + b + 1) * d];
            row.iter().zip(v.iter()).map(|(t, x)| t * x).sum()
        })
    }

    /// T(I, u, v).
    pub fn contract_two(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let d = self.dim;
        let mut out = DVector::zeros(d);
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                let row = &self.data[(a * d + b) * d..(a * d + b + 1) * d];
                let inner: f64 = row.iter().zip(v.iter()).map(|(t, x)| t * x).sum();
                acc += u[b] * inner;
            }
            out[a] = acc;
        }
        out
    }

    /// T(u, u, u).
    pub fn contract_all(&self, u: &DVector<f64>) -> f64 {
        self.contract_two(u, u).dot(u)
    }

    /// Mode-1 unfolding as a `dim × dim²` matrix.
    pub fn unfold(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim * self.dim, &self.data)
    }

    /// T(U, U, U) for a `dim × r` matrix `u`.
    pub fn multilinear(&self, u: &DMatrix<f64>) -> SymTensor3 {
        let d = self.dim;
        let r = u.ncols();
        // contract c, then b, then a
        let mut s1 = vec![0.0; d * d * r];
        for ab in 0..d * d {
            let row = &self.data[ab * d..(ab + 1) * d];
            for k in 0..r {
                s1[ab * r + k] = row.iter().enumerate().map(|(c, t)| t * u[(c, k)]).sum();
            }
        }
        let mut s2 = vec![0.0; d * r * r];
        for a in 0..d {
            for j in 0..r {
                for k in 0..r {
                    let mut acc = 0.0;
                    for b in 0..d {
                        acc += u[(b, j)] * s1[(a * d + b) * r + k];
                    }
                    s2[(a * r + j) * r + k] = acc;
                }
            }
        }
        SymTensor3::from_fn(r, |i, j, k| (0..d).map(|a| u[(a, i)] * s2[(a * r + j) * r + k]).sum())
    }

    /// Largest |T[a,b,c] − T[π(a,b,c)]| over all six index permutations.
    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    let v = self.get(a, b, c);
                    for w in
                        [self.get(a, c, b), self.get(b, a, c), self.get(b, c, a), self.get(c, a, b), self.get(c, b, a)]
                    {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contractions_of_rank_one() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut t = SymTensor3::zeros(3);
        t.add_rank1(2.0, &x);
        let u = DVector::from_vec(vec![0.3, 0.1, -1.0]);
        let xu = x.dot(&u);
        assert!((t.contract_all(&u) - 2.0 * xu.powi(3)).abs() < 1e-12);
        let v = t.contract_two(&u, &u);
        for a in 0..3 {
            assert!((v[a] - 2.0 * xu * xu * x[a]).abs() < 1e-12);
        }
        let m = t.contract_last(&u);
        assert!((m[(0, 1)] - 2.0 * xu * x[0] * x[1]).abs() < 1e-12);
        assert_eq!(t.max_asymmetry(), 0.0);
    }

    #[test]
    fn multilinear_with_identity_is_noop() {
        let t = SymTensor3::from_fn(3, |a, b, c| (a + 2 * b + 3 * c) as f64);
        let i = DMatrix::identity(3, 3);
        assert_eq!(t.multilinear(&i), t);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(SymTensor3::from_vec(2, vec![0.0; 7]).is_err());
        assert!(SymTensor3::from_vec(2, vec![0.0; 8]).is_ok());
    }
}
