//! Gradient of the inversion objective with respect to dummy embeddings.
//!
//! The objective is `grad_match(report(dummies), observed) + λ·feature_match`.
//! Differentiating the gradient-match term requires the derivative of the
//! per-example parameter gradient with respect to the Pooler input, which
//! is written out by hand below.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::forward::{encode, example_trace, report_from_traces, ExampleTrace};
use super::{GradientReport, LossKind, ModelParams, Target};
use crate::{Error, Result};

/// Distance between a candidate's gradient report and the observed one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradMatchKind {
    /// 1 − cos over the concatenation of all reported blocks.
    #[default]
    Cosine,
    /// Σ‖Δ‖₂² + α·Σ‖Δ‖₁.
    L2L1 { alpha: f64 },
}

pub fn grad_match_loss(dummy: &GradientReport, observed: &GradientReport, kind: GradMatchKind) -> Result<f64> {
    Ok(grad_match_adjoint(dummy, observed, kind, false)?.0)
}

/// Loss value and, when `with_adjoint`, its gradient w.r.t. the dummy report.
fn grad_match_adjoint(
    dummy: &GradientReport,
    observed: &GradientReport,
    kind: GradMatchKind,
    with_adjoint: bool,
) -> Result<(f64, Option<GradientReport>)> {
    if !dummy.same_shape(observed) {
        return Err(Error::DimensionMismatch("gradient reports differ in shape".into()));
    }
    match kind {
        GradMatchKind::Cosine => {
            let on = observed.norm();
            if on == 0.0 {
                return Err(Error::ZeroNorm("observed gradient"));
            }
            let dn = dummy.norm();
            if dn == 0.0 {
                // cos taken as 0; the adjoint is undefined, use the descent
                // direction toward the observation.
                let adj = with_adjoint.then(|| {
                    let mut a = observed.clone();
                    a.scale(-1.0 / on);
                    a
                });
                return Ok((1.0, adj));
            }
            let dot = dummy.dot(observed);
            let cos = dot / (dn * on);
            let adj = with_adjoint.then(|| {
                // d(1 − cos)/dD = −G/(|D||G|) + cos·D/|D|²
                let mut a = observed.clone();
                a.scale(-1.0 / (dn * on));
                a.axpy(cos / (dn * dn), dummy);
                a
            });
            Ok((1.0 - cos, adj))
        }
        GradMatchKind::L2L1 { alpha } => {
            let mut delta = dummy.clone();
            delta.axpy(-1.0, observed);
            let l2: f64 = delta.iter().map(|v| v * v).sum();
            let l1: f64 = delta.iter().map(f64::abs).sum();
            let adj = with_adjoint.then(|| {
                let f = |v: &f64| 2.0 * v + alpha * sign(*v);
                GradientReport {
                    grad_w1: delta.grad_w1.map(|v| f(&v)),
                    grad_b1: delta.grad_b1.map(|v| f(&v)),
                    grad_w2: delta.grad_w2.map(|v| f(&v)),
                    loss_kind: delta.loss_kind,
                }
            });
            Ok((l2 + alpha * l1, adj))
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-slot feature directions over the first `d_rec` Pooler coordinates,
/// already assigned and sign-corrected.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTarget {
    pub d_rec: usize,
    pub targets: Vec<DVector<f64>>,
}

impl FeatureTarget {
    /// Mean over the batch of 1 − cos(x_i[..d′], target_i).
    pub fn loss(&self, pooler_in: &[DVector<f64>]) -> Result<f64> {
        Ok(self.loss_and_grads(pooler_in, false)?.0)
    }

    fn loss_and_grads(&self, pooler_in: &[DVector<f64>], with_grad: bool) -> Result<(f64, Vec<DVector<f64>>)> {
        if pooler_in.len() != self.targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} Pooler inputs but {} feature targets",
                pooler_in.len(),
                self.targets.len()
            )));
        }
        let b = pooler_in.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(pooler_in.len());
        for (x, t) in pooler_in.iter().zip(&self.targets) {
            if x.len() < self.d_rec || t.len() != self.d_rec {
                return Err(Error::DimensionMismatch("feature target width".into()));
            }
            let xs = x.rows(0, self.d_rec);
            let xn = xs.norm();
            let tn = t.norm();
            if xn == 0.0 {
                return Err(Error::ZeroNorm("Pooler input"));
            }
            if tn == 0.0 {
                return Err(Error::ZeroNorm("recovered feature"));
            }
            let cos = xs.dot(t) / (xn * tn);
            total += 1.0 - cos;
            if with_grad {
                let mut g = DVector::zeros(x.len());
                for k in 0..self.d_rec {
                    g[k] = -(t[k] / (xn * tn) - cos * xs[k] / (xn * xn)) / b;
                }
                grads.push(g);
            }
        }
        Ok((total / b, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub grad_kind: GradMatchKind,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { grad_kind: GradMatchKind::Cosine, lambda_feat: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct InversionGradients {
    /// grad_match + λ·feature_match.
    pub loss: f64,
    pub grad_match: f64,
    /// Present when a feature target was supplied with positive weight.
    pub feature_match: Option<f64>,
    /// ∂loss/∂dummy, one `L_i × d_emb` matrix per example.
    pub grads: Vec<DMatrix<f64>>,
    pub pooler_in: Vec<DVector<f64>>,
}

/// ∇ₓ ⟨A, ∂ℓ/∂Θ(x)⟩ for one example, where `A` is the adjoint of the
/// gradient-match loss w.r.t. the report.
fn report_pullback(params: &ModelParams, t: &ExampleTrace, adj: &GradientReport) -> DVector<f64> {
    let w1 = &params.w1;
    let w2 = &params.w2;
    let q = &adj.grad_w1 * &t.x + &adj.grad_b1;
    let w2_dz = w2.tr_mul(&t.dz);
    let c = &adj.grad_w2 * &t.hidden;
    let v = w2 * t.d1.component_mul(&q);
    let cv = c + v;
    let s = match (params.loss, &t.probs) {
        (LossKind::Ce, Some(p)) => {
            let pc = p.dot(&cv);
            p.component_mul(&cv) - p * pc
        }
        _ => cv,
    };
    let inner =
        t.d1.component_mul(&(w2.tr_mul(&s) + adj.grad_w2.tr_mul(&t.dz))) + t.d2.component_mul(&q).component_mul(&w2_dz);
    w1.tr_mul(&inner) + adj.grad_w1.tr_mul(&t.d1.component_mul(&w2_dz))
}

/// Exact gradient of the attack objective w.r.t. dummy embeddings.
///
/// `dummy[i]` holds the per-position embeddings of example `i`; labels (and
/// MSE targets, if any) are assumed known.
pub fn embedding_gradients(
    params: &ModelParams,
    dummy: &[DMatrix<f64>],
    labels: &[usize],
    targets: Option<&[Vec<f64>]>,
    observed: &GradientReport,
    features: Option<&FeatureTarget>,
    weights: LossWeights,
) -> Result<InversionGradients> {
    let b = dummy.len();
    if b == 0 {
        return Err(Error::Empty("dummy batch"));
    }
    if labels.len() != b || targets.is_some_and(|t| t.len() != b) {
        return Err(Error::DimensionMismatch("one label/target per dummy example".into()));
    }
    let n_out = params.dims.n_classes;
    let mut traces = Vec::with_capacity(b);
    for (i, emb) in dummy.iter().enumerate() {
        let x = encode(params, emb, None)?;
        let target = match targets {
            Some(t) => Target::Real(DVector::from_column_slice(&t[i])),
            None => Target::Class(labels[i].min(n_out - 1)),
        };
        traces.push(example_trace(params, x, &target)?);
    }
    let report = report_from_traces(params, &traces);
    let (gm, adj) = grad_match_adjoint(&report, observed, weights.grad_kind, true)?;
    let adj = adj.expect("adjoint requested");

    let pooler_in: Vec<DVector<f64>> = traces.iter().map(|t| t.x.clone()).collect();
    let mut gx: Vec<DVector<f64>> = traces.iter().map(|t| report_pullback(params, t, &adj) / b as f64).collect();

    let mut loss = gm;
    let mut feature_match = None;
    if let Some(ft) = features.filter(|_| weights.lambda_feat > 0.0) {
        let (fl, fg) = ft.loss_and_grads(&pooler_in, true)?;
        for (g, f) in gx.iter_mut().zip(fg) {
            g.axpy(weights.lambda_feat, &f, 1.0);
        }
        loss += weights.lambda_feat * fl;
        feature_match = Some(fl);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("inversion loss"));
    }

    let grads = traces
        .iter()
        .zip(&gx)
        .zip(dummy)
        .map(|((t, g), emb)| {
            let pre = g.component_mul(&t.x.map(|v| 1.0 - v * v));
            let g_hbar = params.enc_w.tr_mul(&pre) / emb.nrows().max(1) as f64;
            let mut out = DMatrix::zeros(emb.nrows(), emb.ncols());
            for l in 0..emb.nrows() {
                out.row_mut(l).copy_from(&g_hbar.transpose());
            }
            out
        })
        .collect();

    Ok(InversionGradients { loss, grad_match: gm, feature_match, grads, pooler_in })
}
