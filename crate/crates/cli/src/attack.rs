//! Text-recovery experiment: per (batch size, seed) the head is built, the
//! client gradient observed, features recovered once, and the search run
//! under every configured feature-phase mode.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use poolerleak::attack::{run_attack, AttackResult, CandidateLosses, MatchMode, PhaseTrace};
use poolerleak::data::{bundled, tsv_texts, Dataset, Vocab, PAD_ID};
use poolerleak::model::{forward, init_attack_head, param_gradients};
use poolerleak::recon::{match_oracle, recover_features};
use poolerleak::rng;
use poolerleak::{FeaturePhase, HeadDims, NgramModel, ReconConfig};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{write_csv, JsonlWriter, SCHEMA_VERSION};

/// Stream for batch selection; distinct from every stream the core uses.
const BATCH_STREAM: u64 = 1 << 40;

/// Dataset, vocabulary and prior shared by every run.
pub struct AttackInputs {
    pub vocab: Vocab,
    pub dataset: Dataset,
    pub prior: NgramModel,
}

impl AttackInputs {
    pub fn load(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let spec = &cfg.attack;
        let data_text = match &spec.dataset {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => bundled::TOY_SHORT.to_string(),
        };
        let prior_lines: Vec<String> = match &spec.prior_corpus {
            Some(p) => poolerleak::data::load_lines(p)?,
            None => bundled::TOY_PRIOR.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        };
        let mut lines = prior_lines.clone();
        lines.extend(tsv_texts(&data_text));
        let vocab = Vocab::build(&lines, spec.vocab_max)?;
        let source = spec.dataset.as_ref().map_or("bundled:toy_short".to_string(), |p| p.display().to_string());
        let dataset = Dataset::parse(&data_text, &vocab, Some(spec.max_len), &source)?;
        if dataset.is_empty() {
            anyhow::bail!("{source}: no usable examples");
        }
        let corpus: Vec<Vec<u32>> = prior_lines.iter().map(|l| vocab.tokenize(l)).filter(|s| !s.is_empty()).collect();
        let prior = NgramModel::train(&corpus, vocab.len(), spec.prior_order, spec.prior_k)?;
        Ok(AttackInputs { vocab, dataset, prior })
    }

    /// Distinct example indices for one (batch size, seed) run.
    pub fn pick(&self, b: usize, seed: u64) -> anyhow::Result<Vec<usize>> {
        if b == 0 || b > self.dataset.len() {
            anyhow::bail!("batch size {b} outside 1..={}", self.dataset.len());
        }
        let mut r = rng::stream(seed, BATCH_STREAM + b as u64);
        Ok(sample(&mut r, self.dataset.len(), b).into_vec())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleRecord {
    pub slot: usize,
    pub dataset_index: usize,
    pub reference: String,
    pub recovered: String,
    pub r1: f64,
    pub r2: f64,
    pub r_l: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRun {
    pub batch_size: usize,
    pub seed: u64,
    pub mode: FeaturePhase,
    pub r1: f64,
    pub r2: f64,
    pub r_l: f64,
    /// Mean |cos| of the recovered features against the true Pooler inputs.
    pub feature_quality: f64,
    pub losses: CandidateLosses,
    pub best_init: usize,
    pub best_round: usize,
    pub evaluated: usize,
    pub diverged: usize,
    pub examples: Vec<ExampleRecord>,
    pub traces: Vec<PhaseTrace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackError {
    pub batch_size: usize,
    pub seed: u64,
    /// `None` when the failure happened before any mode ran.
    pub mode: Option<FeaturePhase>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub batch_size: usize,
    pub mode: FeaturePhase,
    pub runs: usize,
    pub r1: f64,
    pub r2: f64,
    pub r_l: f64,
    /// Mean over seeds of (R-1 of this mode − R-1 of `none`), paired by seed.
    pub delta_r1_vs_none: Option<f64>,
    pub feature_quality: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AttackReport {
    pub runs: Vec<AttackRun>,
    pub errors: Vec<AttackError>,
    pub skipped_lines: usize,
}

impl AttackReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: BTreeMap<(usize, usize), Vec<&AttackRun>> = BTreeMap::new();
        let mode_index = |m: FeaturePhase| FeaturePhase::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX);
        for r in &self.runs {
            cells.entry((r.batch_size, mode_index(r.mode))).or_default().push(r);
        }
        let none: BTreeMap<(usize, u64), f64> =
            self.runs.iter().filter(|r| r.mode == FeaturePhase::None).map(|r| ((r.batch_size, r.seed), r.r1)).collect();
        cells
            .values()
            .map(|runs| {
                let n = runs.len() as f64;
                let mean = |f: fn(&AttackRun) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
                let paired: Vec<f64> =
                    runs.iter().filter_map(|r| none.get(&(r.batch_size, r.seed)).map(|b| r.r1 - b)).collect();
                SummaryRow {
                    batch_size: runs[0].batch_size,
                    mode: runs[0].mode,
                    runs: runs.len(),
                    r1: mean(|r| r.r1),
                    r2: mean(|r| r.r2),
                    r_l: mean(|r| r.r_l),
                    delta_r1_vs_none: (paired.len() == runs.len())
                        .then(|| paired.iter().sum::<f64>() / paired.len() as f64),
                    feature_quality: mean(|r| r.feature_quality),
                }
            })
            .collect()
    }

    pub fn cell(&self, batch_size: usize, mode: FeaturePhase) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.batch_size == batch_size && r.mode == mode)
    }
}

struct JobOutput {
    runs: Vec<AttackRun>,
    errors: Vec<AttackError>,
}

fn run_job(inputs: &AttackInputs, cfg: &ExperimentConfig, b: usize, seed: u64) -> JobOutput {
    let fail = |mode, e: &dyn std::fmt::Display| AttackError { batch_size: b, seed, mode, message: e.to_string() };
    let spec = &cfg.attack;
    let prepared = (|| -> anyhow::Result<_> {
        let idx = inputs.pick(b, seed)?;
        let batch = inputs.dataset.batch(&idx)?;
        let n_classes = inputs.dataset.n_labels().max(2);
        let dims = HeadDims::new(inputs.vocab.len(), spec.d_emb, spec.d, n_classes, spec.d_rec, spec.max_len)?;
        let params = init_attack_head(dims, spec.activation, spec.loss, seed)?;
        let observed = param_gradients(&params, &batch)?;
        let rc =
            ReconConfig { d_rec: spec.d_rec, path: spec.recon_path, batch_size: b, seed, ..ReconConfig::default() };
        let rec = recover_features(&observed, &params, &rc)?;
        let truth = forward(&params, &batch)?.pooler_in.columns(0, spec.d_rec).into_owned();
        let matched = match_oracle(&rec, &truth)?;
        let q = matched.quality.as_deref().unwrap_or_default();
        let quality = q.iter().sum::<f64>() / q.len().max(1) as f64;
        // blind mode gets the unmatched directions
        let features = match spec.search.match_mode {
            MatchMode::Oracle => matched,
            MatchMode::Blind => rec,
        };
        Ok((idx, batch, params, observed, features, quality))
    })();
    let (idx, batch, params, observed, features, quality) = match prepared {
        Ok(p) => p,
        Err(e) => {
            log::error!("attack B={b} seed={seed}: {e:#}");
            return JobOutput { runs: vec![], errors: vec![fail(None, &format!("{e:#}"))] };
        }
    };
    let refs: Vec<Vec<u32>> = (0..b).map(|i| batch.stripped(i)).collect();
    let mut out = JobOutput { runs: vec![], errors: vec![] };
    for &mode in &spec.modes {
        let search = spec.search.with_phase(mode).with_seed(seed);
        let result = run_attack(
            &observed,
            &params,
            &batch.lengths(),
            &batch.labels,
            Some(&features),
            Some(&inputs.prior),
            &search,
        )
        .and_then(|mut res| {
            res.evaluate(&refs, PAD_ID)?;
            Ok(res)
        });
        match result {
            Ok(res) => out.runs.push(to_run(inputs, &idx, &refs, b, seed, mode, quality, res)),
            Err(e) => {
                log::error!("attack B={b} seed={seed} mode={mode}: {e}");
                out.errors.push(fail(Some(mode), &e));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn to_run(
    inputs: &AttackInputs,
    idx: &[usize],
    refs: &[Vec<u32>],
    b: usize,
    seed: u64,
    mode: FeaturePhase,
    quality: f64,
    res: AttackResult,
) -> AttackRun {
    let scores = res.metrics.clone().unwrap_or_default();
    let mean = res.mean_rouge().unwrap_or_default();
    let examples = (0..b)
        .map(|i| ExampleRecord {
            slot: i,
            dataset_index: idx[i],
            reference: inputs.vocab.detokenize(&refs[i]),
            recovered: inputs.vocab.detokenize(&res.tokens[i]),
            r1: scores[i].r1,
            r2: scores[i].r2,
            r_l: scores[i].r_l,
        })
        .collect();
    AttackRun {
        batch_size: b,
        seed,
        mode,
        r1: mean.r1,
        r2: mean.r2,
        r_l: mean.r_l,
        feature_quality: quality,
        losses: res.losses,
        best_init: res.best_init,
        best_round: res.best_round,
        evaluated: res.evaluated,
        diverged: res.diverged,
        examples,
        traces: res.traces,
    }
}

/// Runs every (batch size, seed) job; results come back in that order.
pub fn run(inputs: &AttackInputs, cfg: &ExperimentConfig) -> AttackReport {
    let jobs: Vec<(usize, u64)> =
        cfg.attack.batch_sizes.iter().flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s))).collect();
    let outputs: Vec<JobOutput> = jobs.par_iter().map(|&(b, s)| run_job(inputs, cfg, b, s)).collect();
    let mut report = AttackReport { skipped_lines: inputs.dataset.issues.len(), ..Default::default() };
    for o in outputs {
        report.runs.extend(o.runs);
        report.errors.extend(o.errors);
    }
    report
}

#[derive(Serialize)]
struct SummaryCsv<'a> {
    schema_version: u32,
    batch_size: usize,
    mode: FeaturePhase,
    runs: usize,
    r1: f64,
    r2: f64,
    r_l: f64,
    delta_r1_vs_none: Option<f64>,
    feature_quality: f64,
    config: &'a str,
}

#[derive(Serialize)]
struct RunCsv<'a> {
    schema_version: u32,
    batch_size: usize,
    seed: u64,
    mode: FeaturePhase,
    r1: f64,
    r2: f64,
    r_l: f64,
    grad_match: f64,
    feature_match: Option<f64>,
    log_ppl: f64,
    score: f64,
    feature_quality: f64,
    config: &'a str,
}

/// Writes `attack_summary.csv`, `attack_runs.csv` and
/// `attack_details.jsonl`.
pub fn write(report: &AttackReport, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let config_json = serde_json::to_string(cfg)?;
    let summary: Vec<SummaryCsv> = report
        .summary()
        .into_iter()
        .map(|s| SummaryCsv {
            schema_version: SCHEMA_VERSION,
            batch_size: s.batch_size,
            mode: s.mode,
            runs: s.runs,
            r1: s.r1,
            r2: s.r2,
            r_l: s.r_l,
            delta_r1_vs_none: s.delta_r1_vs_none,
            feature_quality: s.feature_quality,
            config: &config_json,
        })
        .collect();
    write_csv(&out.join("attack_summary.csv"), &summary)?;
    let runs: Vec<RunCsv> = report
        .runs
        .iter()
        .map(|r| RunCsv {
            schema_version: SCHEMA_VERSION,
            batch_size: r.batch_size,
            seed: r.seed,
            mode: r.mode,
            r1: r.r1,
            r2: r.r2,
            r_l: r.r_l,
            grad_match: r.losses.grad_match,
            feature_match: r.losses.feature_match,
            log_ppl: r.losses.log_ppl,
            score: r.losses.score,
            feature_quality: r.feature_quality,
            config: &config_json,
        })
        .collect();
    write_csv(&out.join("attack_runs.csv"), &runs)?;
    let mut jl = JsonlWriter::create(&out.join("attack_details.jsonl"), "attack", cfg)?;
    for r in &report.runs {
        jl.write(&serde_json::json!({ "kind": "run", "run": r }))?;
    }
    for e in &report.errors {
        jl.write(&serde_json::json!({ "kind": "error", "error": e }))?;
    }
    jl.finish()
}
