use nalgebra::{DMatrix, DVector};

use super::{Batch, GradientReport, LossKind, ModelParams, Target};
use crate::{Error, Result};

/// Per-batch forward outputs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pooler_in: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub logits: DMatrix<f64>,
    pub loss: f64,
}

/// Everything the backward passes need for one example.
#[derive(Debug, Clone)]
pub(crate) struct ExampleTrace {
    pub x: DVector<f64>,
    /// σ′(u), σ″(u) at the Pooler pre-activation.
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub hidden: DVector<f64>,
    pub logits: DVector<f64>,
    /// ∂ℓ/∂logits.
    pub dz: DVector<f64>,
    /// Softmax probabilities (CE only).
    pub probs: Option<DVector<f64>>,
    pub loss: f64,
}

impl ExampleTrace {
    /// ∂ℓ/∂u = σ′(u) ⊙ W2ᵀ δz.
    pub fn du(&self, params: &ModelParams) -> DVector<f64> {
        (params.w2.tr_mul(&self.dz)).component_mul(&self.d1)
    }
}

/// Pooler input for one sequence given its per-position embeddings
/// (`L × d_emb`). Positions holding `mask == false` are skipped.
pub(crate) fn encode(params: &ModelParams, embeds: &DMatrix<f64>, mask: Option<&[bool]>) -> Result<DVector<f64>> {
    let len = embeds.nrows();
    if len > params.dims.max_len {
        return Err(Error::DimensionMismatch(format!("sequence length {len} exceeds max_len {}", params.dims.max_len)));
    }
    if embeds.ncols() != params.dims.d_emb {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} != d_emb {}",
            embeds.ncols(),
            params.dims.d_emb
        )));
    }
    let mut hbar = DVector::zeros(params.dims.d_emb);
    let mut count = 0usize;
    for l in 0..len {
        if mask.is_some_and(|m| !m[l]) {
            continue;
        }
        hbar += embeds.row(l).transpose();
        hbar += params.pos.row(l).transpose();
        count += 1;
    }
    if count > 0 {
        hbar /= count as f64;
    }
    Ok((&params.enc_w * hbar).map(f64::tanh))
}

fn token_embeddings(params: &ModelParams, ids: &[u32], pad_id: u32) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let vocab = params.dims.vocab_size;
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfVocab { id: bad, vocab });
    }
    let mask = ids.iter().map(|&t| t != pad_id).collect();
    Ok((params.embed_tokens(ids), mask))
}

/// Head forward pass and loss for one example given its Pooler input.
pub(crate) fn example_trace(params: &ModelParams, x: DVector<f64>, target: &Target) -> Result<ExampleTrace> {
    let act = params.activation;
    let u = &params.w1 * &x + &params.b1;
    let hidden = u.map(|v| act.eval(v, 0));
    let d1 = u.map(|v| act.eval(v, 1));
    let d2 = u.map(|v| act.eval(v, 2));
    let logits = &params.w2 * &hidden;
    let n = logits.len();

    let (dz, probs, loss) = match params.loss {
        LossKind::Ce => {
            let label = match target {
                Target::Class(c) => *c,
                Target::Real(_) => return Err(Error::InvalidArgument("CE loss needs class labels".into())),
            };
            if label >= n {
                return Err(Error::InvalidArgument(format!("label {label} >= {n} classes")));
            }
            let max = logits.max();
            let exp = logits.map(|v| (v - max).exp());
            let sum = exp.sum();
            let probs = exp / sum;
            let loss = -(logits[label] - max - sum.ln());
            let mut dz = probs.clone();
            dz[label] -= 1.0;
            (dz, Some(probs), loss)
        }
        LossKind::Mse => {
            let t = match target {
                Target::Real(t) => {
                    if t.len() != n {
                        return Err(Error::DimensionMismatch(format!("target width {} != {n} outputs", t.len())));
                    }
                    t.clone()
                }
                Target::Class(c) => {
                    let mut t = DVector::zeros(n);
                    if *c < n {
                        t[*c] = 1.0;
                    }
                    t
                }
            };
            let r = &logits - t;
            let loss = 0.5 * r.norm_squared();
            (r, None, loss)
        }
    };
    Ok(ExampleTrace { x, d1, d2, hidden, logits, dz, probs, loss })
}

fn batch_traces(params: &ModelParams, batch: &Batch) -> Result<Vec<ExampleTrace>> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.labels.len() != batch.len() {
        return Err(Error::DimensionMismatch("one label per sequence".into()));
    }
    batch
        .sequences
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let (emb, mask) = token_embeddings(params, ids, batch.pad_id)?;
            let x = encode(params, &emb, Some(&mask))?;
            example_trace(params, x, &batch.target_for(i, params.dims.n_classes))
        })
        .collect()
}

/// Forward pass over a batch; `loss` is the batch mean.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardPass> {
    let traces = batch_traces(params, batch)?;
    let b = traces.len();
    let dims = &params.dims;
    let mut pooler_in = DMatrix::zeros(b, dims.d);
    let mut hidden = DMatrix::zeros(b, dims.m_total());
    let mut logits = DMatrix::zeros(b, dims.n_classes);
    let mut loss = 0.0;
    for (i, t) in traces.iter().enumerate() {
        pooler_in.row_mut(i).copy_from(&t.x.transpose());
        hidden.row_mut(i).copy_from(&t.hidden.transpose());
        logits.row_mut(i).copy_from(&t.logits.transpose());
        loss += t.loss;
    }
    Ok(ForwardPass { pooler_in, hidden, logits, loss: loss / b as f64 })
}

/// Accumulates one example's parameter gradient into `report` with weight `w`.
pub(crate) fn accumulate_example(params: &ModelParams, t: &ExampleTrace, w: f64, report: &mut GradientReport) {
    let du = t.du(params);
    report.grad_w1.ger(w, &du, &t.x, 1.0);
    report.grad_b1.axpy(w, &du, 1.0);
    report.grad_w2.ger(w, &t.dz, &t.hidden, 1.0);
}

pub(crate) fn report_from_traces(params: &ModelParams, traces: &[ExampleTrace]) -> GradientReport {
    let mut report = GradientReport::zeros(&params.dims, params.loss);
    let w = 1.0 / traces.len() as f64;
    for t in traces {
        accumulate_example(params, t, w, &mut report);
    }
    report
}

/// Batch-mean gradient of the loss w.r.t. `W1`, `b1` and `W2`. Embedding
/// gradients are never reported.
pub fn param_gradients(params: &ModelParams, batch: &Batch) -> Result<GradientReport> {
    let traces = batch_traces(params, batch)?;
    let report = report_from_traces(params, &traces);
    if !report.is_finite() {
        return Err(Error::NonFinite("gradient report"));
    }
    Ok(report)
}
