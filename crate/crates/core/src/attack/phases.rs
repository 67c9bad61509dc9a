use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::decode::{nearest_tokens, project_to_tokens};
use super::{AttackConfig, AttackResult, CandidateLosses, CandidateState, PhaseKind, PhaseTrace, StepSchedule};
use crate::model::{
    accumulate_example, embedding_gradients, encode, example_trace, grad_match_loss, FeatureTarget, GradientReport,
    LossWeights, ModelParams, Target,
};
use crate::prior::NgramModel;
use crate::recon::{match_blind, Assignment, RecoveredFeatures};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Everything a phase needs besides the candidate itself.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub params: &'a ModelParams,
    pub observed: &'a GradientReport,
    pub labels: &'a [usize],
    /// Matched (oracle mode) or unmatched (blind mode) recovered features.
    pub features: Option<&'a RecoveredFeatures>,
    pub prior: Option<&'a NgramModel>,
    pub cfg: &'a AttackConfig,
}

/// Mean over the batch of 1 − cos(pooler_in_i[..d′], sign·x̂) for the
/// feature assigned to slot i.
pub fn feature_match_loss(pooler_in: &DMatrix<f64>, rec: &RecoveredFeatures, assignment: &Assignment) -> Result<f64> {
    if pooler_in.nrows() != rec.len() || assignment.slot_of.len() != rec.len() {
        return Err(Error::DimensionMismatch("one Pooler row and one assignment per feature".into()));
    }
    let rows: Vec<DVector<f64>> = (0..pooler_in.nrows()).map(|i| pooler_in.row(i).transpose()).collect();
    rec.with_assignment(assignment).feature_target().loss(&rows)
}

struct Contribution {
    report: GradientReport,
    x: DVector<f64>,
}

fn contribution(params: &ModelParams, emb: &DMatrix<f64>, label: usize) -> Result<Contribution> {
    let x = encode(params, emb, None)?;
    let trace = example_trace(params, x, &Target::Class(label))?;
    let mut report = GradientReport::zeros(&params.dims, params.loss);
    accumulate_example(params, &trace, 1.0, &mut report);
    Ok(Contribution { report, x: trace.x })
}

impl AttackContext<'_> {
    fn batch_size(&self) -> usize {
        self.labels.len()
    }

    fn pooler_inputs(&self, embeds: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
        embeds.iter().map(|e| encode(self.params, e, None)).collect()
    }

    /// Feature target for a phase, or `None` when the phase runs without one.
    fn feature_target(&self, embeds: &[DMatrix<f64>], phase_uses: bool) -> Result<Option<FeatureTarget>> {
        let Some(rec) = self.features.filter(|_| phase_uses && self.cfg.lambda_feat > 0.0) else {
            return Ok(None);
        };
        match self.cfg.match_mode {
            super::MatchMode::Oracle => Ok(Some(rec.feature_target())),
            super::MatchMode::Blind => {
                let xs = self.pooler_inputs(embeds)?;
                let d = rec.dim();
                let guess = DMatrix::from_fn(xs.len(), d, |i, k| xs[i][k]);
                let a = match_blind(rec, &guess)?;
                Ok(Some(rec.with_assignment(&a).feature_target()))
            }
        }
    }

    fn log_ppl(&self, ids: &[u32]) -> Result<f64> {
        match self.prior {
            Some(p) => p.log_perplexity(ids),
            None => Ok(0.0),
        }
    }

    /// Discrete-phase metric from per-example contributions, summed in slot
    /// order.
    fn score(&self, contribs: &[&Contribution], ppl: &[f64], feat: Option<&FeatureTarget>) -> Result<CandidateLosses> {
        let b = contribs.len();
        let mut report = GradientReport::zeros(&self.params.dims, self.params.loss);
        for c in contribs {
            report.axpy(1.0, &c.report);
        }
        report.scale(1.0 / b as f64);
        let grad_match = grad_match_loss(&report, self.observed, self.cfg.grad_kind)?;
        let feature_match = match feat {
            Some(f) => Some(f.loss(&contribs.iter().map(|c| c.x.clone()).collect::<Vec<_>>())?),
            None => None,
        };
        let log_ppl = ppl.iter().sum::<f64>() / b as f64;
        let score =
            grad_match + self.cfg.lambda_ppl * log_ppl + feature_match.map_or(0.0, |f| self.cfg.lambda_feat * f);
        Ok(CandidateLosses { grad_match, feature_match, log_ppl, score })
    }

    fn snapped(&self, ids: &[Vec<u32>]) -> Vec<DMatrix<f64>> {
        ids.iter().map(|s| self.params.embed_tokens(s)).collect()
    }

    /// Scores token sequences with the discrete-phase metric.
    fn score_ids(&self, ids: &[Vec<u32>], embeds_for_assignment: &[DMatrix<f64>]) -> Result<CandidateLosses> {
        let snapped = self.snapped(ids);
        let feat = self.feature_target(embeds_for_assignment, self.cfg.feature_phase.in_discrete())?;
        let contribs = snapped
            .iter()
            .zip(self.labels)
            .map(|(e, &y)| contribution(self.params, e, y))
            .collect::<Result<Vec<_>>>()?;
        let ppl = ids.iter().map(|s| self.log_ppl(s)).collect::<Result<Vec<_>>>()?;
        self.score(&contribs.iter().collect::<Vec<_>>(), &ppl, feat.as_ref())
    }
}

fn step_size(cfg: &AttackConfig, t: usize) -> f64 {
    match cfg.schedule {
        StepSchedule::Constant => cfg.step_size,
        StepSchedule::Cosine => {
            let frac = t as f64 / cfg.continuous_steps.max(1) as f64;
            cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

fn row_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

/// Gradient descent on the dummy embeddings for `continuous_steps` steps,
/// followed by nearest-token projection. A non-finite objective marks the
/// candidate as diverged and leaves its embeddings untouched.
pub fn continuous_phase(state: &CandidateState, ctx: &AttackContext) -> Result<(CandidateState, PhaseTrace)> {
    let cfg = ctx.cfg;
    let feat = ctx.feature_target(&state.embeds, cfg.feature_phase.in_continuous())?;
    let weights =
        LossWeights { grad_kind: cfg.grad_kind, lambda_feat: if feat.is_some() { cfg.lambda_feat } else { 0.0 } };
    let mut embeds = state.embeds.clone();
    let mut trace = PhaseTrace {
        init_index: state.init_index,
        round: state.round,
        phase: PhaseKind::Continuous,
        losses: Vec::new(),
    };
    let diverged = |trace: PhaseTrace| {
        let mut out = state.clone();
        out.diverged = true;
        Ok((out, trace))
    };
    for t in 0..cfg.continuous_steps {
        let ig = match embedding_gradients(ctx.params, &embeds, ctx.labels, None, ctx.observed, feat.as_ref(), weights)
        {
            Ok(ig) => ig,
            Err(Error::NonFinite(_)) => return diverged(trace),
            Err(e) => return Err(e),
        };
        trace.losses.push(ig.loss);
        let eta = step_size(cfg, t);
        for (e, g) in embeds.iter_mut().zip(&ig.grads) {
            *e -= g * eta;
        }
        if embeds.iter().any(|e| !e.iter().all(|v| v.is_finite())) {
            return diverged(trace);
        }
    }
    let ids: Vec<Vec<u32>> = embeds.iter().map(|e| project_to_tokens(&ctx.params.embed, e, cfg.min_token_id)).collect();
    let losses = ctx.score_ids(&ids, &embeds)?;
    let target_means = Some(embeds.iter().map(row_mean).collect());
    Ok((
        CandidateState {
            embeds,
            ids,
            target_means,
            losses,
            init_index: state.init_index,
            round: state.round,
            diverged: false,
        },
        trace,
    ))
}

/// Edits of one sequence: pairwise swaps, single-token moves (non-adjacent,
/// adjacent moves being swaps) and replacements aimed at the target mean.
fn edit_candidates(params: &ModelParams, seq: &[u32], target_mean: &DVector<f64>, cfg: &AttackConfig) -> Vec<Vec<u32>> {
    let len = seq.len();
    let mut out = Vec::new();
    for a in 0..len {
        for b in a + 1..len {
            if seq[a] != seq[b] {
                let mut s = seq.to_vec();
                s.swap(a, b);
                out.push(s);
            }
        }
    }
    for from in 0..len {
        for to in 0..len {
            if from.abs_diff(to) < 2 {
                continue;
            }
            let mut s = seq.to_vec();
            let tok = s.remove(from);
            s.insert(to, tok);
            if s != seq {
                out.push(s);
            }
        }
    }
    // The encoder averages over positions, so moving the mean to the target
    // by changing one position needs L times the mean offset there.
    let current_mean = row_mean(&params.embed_tokens(seq));
    let offset = (target_mean - current_mean) * len as f64;
    for l in 0..len {
        let aim = params.embed.row(seq[l] as usize).transpose() + &offset;
        for tok in nearest_tokens(&params.embed, &aim, cfg.replace_top_k + 1, cfg.min_token_id)
            .into_iter()
            .filter(|&t| t != seq[l])
            .take(cfg.replace_top_k)
        {
            let mut s = seq.to_vec();
            s[l] = tok;
            out.push(s);
        }
    }
    out
}

/// Strict improvement beyond summation-order rounding. Reorderings of a
/// sequence give the same gradient up to a few ulps and must not count.
fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-12 * old.abs().max(1.0)
}

/// Token-level search: for each example in turn, repeatedly adopt the best
/// edit while it lowers the discrete-phase score.
pub fn discrete_phase(state: &CandidateState, ctx: &AttackContext) -> Result<(CandidateState, PhaseTrace)> {
    let cfg = ctx.cfg;
    let params = ctx.params;
    let feat = ctx.feature_target(&state.embeds, cfg.feature_phase.in_discrete())?;
    let mut ids = state.ids.clone();
    let targets: Vec<DVector<f64>> = match &state.target_means {
        Some(t) => t.clone(),
        None => state.embeds.iter().map(row_mean).collect(),
    };
    let mut contribs = ids
        .iter()
        .zip(ctx.labels)
        .map(|(s, &y)| contribution(params, &params.embed_tokens(s), y))
        .collect::<Result<Vec<_>>>()?;
    let mut ppl = ids.iter().map(|s| ctx.log_ppl(s)).collect::<Result<Vec<_>>>()?;
    let mut current = ctx.score(&contribs.iter().collect::<Vec<_>>(), &ppl, feat.as_ref())?;
    let mut trace = PhaseTrace {
        init_index: state.init_index,
        round: state.round,
        phase: PhaseKind::Discrete,
        losses: vec![current.score],
    };

    for i in 0..ctx.batch_size() {
        for _ in 0..cfg.discrete_steps {
            let cands = edit_candidates(params, &ids[i], &targets[i], cfg);
            let scored: Vec<Result<(Contribution, f64, CandidateLosses)>> = cands
                .par_iter()
                .map(|cand| {
                    let c = contribution(params, &params.embed_tokens(cand), ctx.labels[i])?;
                    let p = ctx.log_ppl(cand)?;
                    let mut refs: Vec<&Contribution> = contribs.iter().collect();
                    refs[i] = &c;
                    let mut pp = ppl.clone();
                    pp[i] = p;
                    let l = ctx.score(&refs, &pp, feat.as_ref())?;
                    Ok((c, p, l))
                })
                .collect();
            let mut best: Option<(usize, Contribution, f64, CandidateLosses)> = None;
            for (k, r) in scored.into_iter().enumerate() {
                let (c, p, l) = r?;
                if best.as_ref().is_none_or(|b| l.score < b.3.score) {
                    best = Some((k, c, p, l));
                }
            }
            match best {
                Some((k, c, p, l)) if improves(l.score, current.score) => {
                    ids[i] = cands[k].clone();
                    contribs[i] = c;
                    ppl[i] = p;
                    current = l;
                    trace.losses.push(current.score);
                }
                _ => break,
            }
        }
    }
    let embeds = ctx.snapped(&ids);
    // the stored losses must match a fresh evaluation of the final tokens
    let losses = ctx.score(&contribs.iter().collect::<Vec<_>>(), &ppl, feat.as_ref())?;
    Ok((
        CandidateState {
            embeds,
            ids,
            target_means: state.target_means.clone(),
            losses,
            init_index: state.init_index,
            round: state.round,
            diverged: false,
        },
        trace,
    ))
}

fn init_state(ctx: &AttackContext, lengths: &[usize], index: usize) -> Result<CandidateState> {
    let params = ctx.params;
    let mut rng = rng::stream(ctx.cfg.seed, streams::ATTACK_INIT + index as u64);
    let normal = Normal::new(0.0, params.embedding_std().max(1e-12))
        .map_err(|e| Error::InvalidArgument(format!("embedding scale: {e}")))?;
    let ids: Vec<Vec<u32>> = lengths
        .iter()
        .map(|&len| {
            let dummy = DMatrix::from_fn(len, params.dims.d_emb, |_, _| normal.sample(&mut rng));
            project_to_tokens(&params.embed, &dummy, ctx.cfg.min_token_id)
        })
        .collect();
    let embeds = ctx.snapped(&ids);
    let losses = ctx.score_ids(&ids, &embeds)?;
    Ok(CandidateState { embeds, ids, target_means: None, losses, init_index: index, round: 0, diverged: false })
}

/// Full search. Candidates are ranked by the discrete-phase score on their
/// decoded tokens; the result is the lowest-scoring state ever evaluated,
/// ties to the lower initialization index and then the earlier round.
pub fn run_attack(
    observed: &GradientReport,
    params: &ModelParams,
    lengths: &[usize],
    labels: &[usize],
    rec: Option<&RecoveredFeatures>,
    prior: Option<&NgramModel>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let b = lengths.len();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch(format!("{b} lengths but {} labels", labels.len())));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > params.dims.max_len) {
        return Err(Error::InvalidArgument(format!("sequence length {bad} outside 1..={}", params.dims.max_len)));
    }
    if let Some(r) = rec {
        if r.len() != b {
            return Err(Error::DimensionMismatch(format!("{} recovered features for batch of {b}", r.len())));
        }
    }
    if cfg.min_token_id as usize >= params.dims.vocab_size {
        return Err(Error::InvalidArgument("no decodable tokens".into()));
    }
    let ctx = AttackContext { params, observed, labels, features: rec, prior, cfg };

    let inits = (0..cfg.n_inits).into_par_iter().map(|k| init_state(&ctx, lengths, k)).collect::<Result<Vec<_>>>()?;
    let mut traces: Vec<PhaseTrace> = inits
        .iter()
        .map(|s| PhaseTrace {
            init_index: s.init_index,
            round: 0,
            phase: PhaseKind::Init,
            losses: vec![s.losses.score],
        })
        .collect();
    let mut evaluated = inits.len();
    let mut best = inits[0].clone();
    let better = |a: &CandidateState, b: &CandidateState| {
        a.losses
            .score
            .total_cmp(&b.losses.score)
            .then(a.init_index.cmp(&b.init_index))
            .then(a.round.cmp(&b.round))
            .is_lt()
    };
    for s in &inits {
        if better(s, &best) {
            best = s.clone();
        }
    }
    let mut states = inits;
    states.sort_by(|a, b| a.losses.score.total_cmp(&b.losses.score).then(a.init_index.cmp(&b.init_index)));
    states.truncate(cfg.keep);

    let mut diverged = 0usize;
    for round in 1..=cfg.rounds {
        let outcomes = states
            .par_iter()
            .map(|s| -> Result<(Vec<CandidateState>, Vec<PhaseTrace>)> {
                let mut s = s.clone();
                s.round = round;
                let (after_c, tc) = continuous_phase(&s, &ctx)?;
                if after_c.diverged {
                    return Ok((vec![after_c], vec![tc]));
                }
                let (after_d, td) = discrete_phase(&after_c, &ctx)?;
                Ok((vec![after_c, after_d], vec![tc, td]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = Vec::with_capacity(states.len());
        for (evals, ts) in outcomes {
            traces.extend(ts);
            if evals[0].diverged {
                diverged += 1;
                continue;
            }
            for s in &evals {
                evaluated += 1;
                if better(s, &best) {
                    best = s.clone();
                }
            }
            next.push(evals.into_iter().next_back().expect("discrete state"));
        }
        if next.is_empty() {
            return Err(Error::AllDiverged(diverged));
        }
        states = next;
    }

    Ok(AttackResult {
        tokens: best.ids.clone(),
        losses: best.losses,
        best_init: best.init_index,
        best_round: best.round,
        traces,
        evaluated,
        diverged,
        metrics: None,
        config: *cfg,
        seed: cfg.seed,
    })
}
