//! ROUGE scoring of aligned reference / hypothesis files.

use std::path::Path;

use anyhow::Context;
use poolerleak::RougeScores;
use serde::Serialize;

use crate::output::{write_csv, SCHEMA_VERSION};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_line: Vec<RougeScores>,
    pub mean: RougeScores,
}

/// Scores line `i` of `hypothesis` against line `i` of `reference`, on
/// whitespace tokens.
pub fn score_texts(reference: &str, hypothesis: &str) -> anyhow::Result<EvalReport> {
    let refs: Vec<&str> = reference.lines().collect();
    let hyps: Vec<&str> = hypothesis.lines().collect();
    if refs.len() != hyps.len() {
        anyhow::bail!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len());
    }
    let per_line: Vec<RougeScores> = refs
        .iter()
        .zip(&hyps)
        .map(|(r, h)| {
            let r: Vec<&str> = r.split_whitespace().collect();
            let h: Vec<&str> = h.split_whitespace().collect();
            RougeScores::compute(&r, &h)
        })
        .collect();
    let mean = RougeScores::mean(&per_line);
    Ok(EvalReport { per_line, mean })
}

pub fn score_files(reference: &Path, hypothesis: &Path) -> anyhow::Result<EvalReport> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    score_texts(&read(reference)?, &read(hypothesis)?)
}

pub fn print(report: &EvalReport) {
    println!("line\tr1\tr2\trl");
    for (i, s) in report.per_line.iter().enumerate() {
        println!("{}\t{:.3}\t{:.3}\t{:.3}", i + 1, s.r1, s.r2, s.r_l);
    }
    let m = &report.mean;
    println!("mean\t{:.3}\t{:.3}\t{:.3}", m.r1, m.r2, m.r_l);
}

#[derive(Serialize)]
struct Row<'a> {
    schema_version: u32,
    line: &'a str,
    r1: f64,
    r2: f64,
    r_l: f64,
    config: &'a str,
}

/// Per-line rows followed by a `mean` row.
pub fn write(report: &EvalReport, reference: &Path, hypothesis: &Path, out: &Path) -> anyhow::Result<()> {
    let config = serde_json::json!({ "reference": reference, "hypothesis": hypothesis }).to_string();
    let labels: Vec<String> = (1..=report.per_line.len()).map(|i| i.to_string()).collect();
    let mut rows: Vec<Row> = report
        .per_line
        .iter()
        .zip(&labels)
        .map(|(s, l)| Row { schema_version: SCHEMA_VERSION, line: l, r1: s.r1, r2: s.r2, r_l: s.r_l, config: &config })
        .collect();
    let m = &report.mean;
    rows.push(Row { schema_version: SCHEMA_VERSION, line: "mean", r1: m.r1, r2: m.r2, r_l: m.r_l, config: &config });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(out, &rows)
}
