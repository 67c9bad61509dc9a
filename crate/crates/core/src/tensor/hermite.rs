use nalgebra::{DMatrix, DVector};

use super::SymTensor3;

/// H₂(w) = w wᵀ − I.
pub fn hermite2(w: &DVector<f64>) -> DMatrix<f64> {
    let d = w.len();
    w * w.transpose() - DMatrix::identity(d, d)
}

/// H₃(w)_{abc} = w_a w_b w_c − w_a δ_bc − w_b δ_ac − w_c δ_ab.
pub fn hermite3(w: &DVector<f64>) -> SymTensor3 {
    let mut t = SymTensor3::zeros(w.len());
    t.add_rank1(1.0, w);
    let d = w.len();
    for a in 0..d {
        for b in 0..d {
            // δ_bc: c = b
            let v = t.get(a, b, b) - w[a];
            t.set(a, b, b, v);
            // δ_ac: c = a
            let v = t.get(a, b, a) - w[b];
            t.set(a, b, a, v);
            // δ_ab: a = b
            let v = t.get(a, a, b) - w[b];
            t.set(a, a, b, v);
        }
    }
    t
}

/// H₄(w)(I, I, I, u): the fourth-order Hermite tensor contracted on its
/// last index with `u`.
///
/// H₄(w)_{abcd} = w_a w_b w_c w_d − Σ₆ w w δ + Σ₃ δ δ.
pub fn hermite4_contract(w: &DVector<f64>, u: &DVector<f64>) -> SymTensor3 {
    let d = w.len();
    let wu = w.dot(u);
    SymTensor3::from_fn(d, |a, b, c| {
        let dab = (a == b) as u8 as f64;
        let dac = (a == c) as u8 as f64;
        let dbc = (b == c) as u8 as f64;
        let quartic = wu * w[a] * w[b] * w[c];
        let pairs =
            w[a] * w[b] * u[c] + w[a] * w[c] * u[b] + w[b] * w[c] * u[a] + wu * (w[a] * dbc + w[b] * dac + w[c] * dab);
        let deltas = dab * u[c] + dac * u[b] + dbc * u[a];
        quartic - pairs + deltas
    })
}
