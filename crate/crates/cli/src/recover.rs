//! Feature-recovery sweep over (d′, batch size, seed) on synthetic batches.

use std::path::Path;

use poolerleak::data::synth_batch;
use poolerleak::model::{forward, init_attack_head, param_gradients};
use poolerleak::recon::{match_oracle, recover_features};
use poolerleak::{HeadDims, ReconConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{write_csv, JsonlWriter, SCHEMA_VERSION};

#[derive(Debug, Clone, Serialize)]
pub struct RecoverRun {
    pub d_rec: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mean_cos: f64,
    pub min_cos: f64,
    pub per_feature: Vec<f64>,
    pub weights: Vec<f64>,
    pub residual: f64,
    pub condition: f64,
    pub contested: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoverError {
    pub d_rec: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct RecoverReport {
    pub runs: Vec<RecoverRun>,
    pub errors: Vec<RecoverError>,
}

impl RecoverReport {
    /// Mean quality over seeds for one (d′, B) cell.
    pub fn cell_mean(&self, d_rec: usize, batch_size: usize) -> Option<f64> {
        let qs: Vec<f64> =
            self.runs.iter().filter(|r| r.d_rec == d_rec && r.batch_size == batch_size).map(|r| r.mean_cos).collect();
        (!qs.is_empty()).then(|| qs.iter().sum::<f64>() / qs.len() as f64)
    }
}

fn run_one(cfg: &ExperimentConfig, d_rec: usize, b: usize, seed: u64) -> poolerleak::Result<RecoverRun> {
    let spec = &cfg.recover;
    let dims = HeadDims::new(spec.vocab_size, spec.d_emb, spec.d, spec.n_classes, d_rec, spec.max_len)?;
    let params = init_attack_head(dims, spec.activation, spec.loss_kind(), seed)?;
    let batch = synth_batch(spec.vocab_size, b, spec.min_len..=spec.max_len, spec.n_classes, seed, false)?;
    let report = param_gradients(&params, &batch)?;
    let rc = ReconConfig {
        d_rec,
        path: spec.path,
        method: spec.method,
        restarts: spec.restarts,
        batch_size: b,
        seed,
        output_row: None,
        control_variate: spec.control_variate,
    };
    let rec = recover_features(&report, &params, &rc)?;
    let truth = forward(&params, &batch)?.pooler_in.columns(0, d_rec).into_owned();
    let matched = match_oracle(&rec, &truth)?;
    let per_feature = matched.quality.clone().unwrap_or_default();
    Ok(RecoverRun {
        d_rec,
        batch_size: b,
        seed,
        mean_cos: per_feature.iter().sum::<f64>() / per_feature.len() as f64,
        min_cos: per_feature.iter().copied().fold(f64::INFINITY, f64::min),
        per_feature,
        weights: matched.weights.clone(),
        residual: matched.residual,
        condition: matched.condition,
        contested: matched.contested.len(),
    })
}

/// Runs the grid in (d′, B, seed) order. The order of the results does not
/// depend on how many workers run it.
pub fn run(cfg: &ExperimentConfig) -> RecoverReport {
    let jobs: Vec<(usize, usize, u64)> = cfg
        .recover
        .d_rec
        .iter()
        .flat_map(|&d| cfg.recover.batch_sizes.iter().flat_map(move |&b| cfg.seeds.iter().map(move |&s| (d, b, s))))
        .collect();
    let results: Vec<_> = jobs.par_iter().map(|&(d, b, s)| (d, b, s, run_one(cfg, d, b, s))).collect();
    let mut report = RecoverReport::default();
    for (d_rec, batch_size, seed, r) in results {
        match r {
            Ok(run) => report.runs.push(run),
            Err(e) => {
                log::error!("recover d'={d_rec} B={batch_size} seed={seed}: {e}");
                report.errors.push(RecoverError { d_rec, batch_size, seed, message: e.to_string() });
            }
        }
    }
    report
}

#[derive(Serialize)]
struct CsvRow<'a> {
    schema_version: u32,
    d_rec: usize,
    batch_size: usize,
    seed: u64,
    mean_cos: f64,
    min_cos: f64,
    residual: f64,
    condition: f64,
    contested: usize,
    config: &'a str,
}

/// Writes `recover.csv` and `recover_details.jsonl`.
pub fn write(report: &RecoverReport, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let config_json = serde_json::to_string(cfg)?;
    let rows: Vec<CsvRow> = report
        .runs
        .iter()
        .map(|r| CsvRow {
            schema_version: SCHEMA_VERSION,
            d_rec: r.d_rec,
            batch_size: r.batch_size,
            seed: r.seed,
            mean_cos: r.mean_cos,
            min_cos: r.min_cos,
            residual: r.residual,
            condition: r.condition,
            contested: r.contested,
            config: &config_json,
        })
        .collect();
    write_csv(&out.join("recover.csv"), &rows)?;
    let mut jl = JsonlWriter::create(&out.join("recover_details.jsonl"), "recover", cfg)?;
    for r in &report.runs {
        jl.write(&serde_json::json!({ "kind": "run", "run": r }))?;
    }
    for e in &report.errors {
        jl.write(&serde_json::json!({ "kind": "error", "error": e }))?;
    }
    jl.finish()
}
