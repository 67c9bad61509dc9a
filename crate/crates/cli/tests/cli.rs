use std::path::Path;
use std::process::Command;

use poolerleak::FeaturePhase;
use poolerleak_cli::attack::{self, AttackInputs};
use poolerleak_cli::config::parse_list;
use poolerleak_cli::{eval, recover, ExperimentConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_poolerleak"))
}

fn small_recover() -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seeds: vec![0, 1, 2], ..Default::default() };
    cfg.recover.vocab_size = 1_040;
    cfg.recover.d = 40;
    cfg.recover.d_rec = vec![8, 12];
    cfg.recover.batch_sizes = vec![1, 2];
    cfg
}

fn small_attack() -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seeds: vec![1, 2, 3], ..Default::default() };
    cfg.attack.batch_sizes = vec![1, 2];
    cfg.attack.search.n_inits = 2;
    cfg.attack.search.rounds = 1;
    cfg.attack.search.continuous_steps = 20;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn recover_grid_has_one_row_per_cell_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_recover();
    let status = bin()
        .args(["--workers", "2", "recover", "--config", &write_config(tmp.path(), &cfg), "--out"])
        .arg(tmp.path().join("r"))
        .status()
        .unwrap();
    assert!(status.success());
    let rows = csv_rows(&tmp.path().join("r/recover.csv"));
    assert_eq!(rows.len(), 12);
    let header = csv::Reader::from_path(tmp.path().join("r/recover.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(&header[0], "schema_version");
    assert_eq!(header.iter().next_back(), Some("config"));
    let echoed: ExperimentConfig = serde_json::from_str(&rows[0][header.len() - 1]).unwrap();
    assert_eq!(echoed, cfg);
    // deterministic (d′, B, seed) order
    let keys: Vec<(String, String, String)> = rows.iter().map(|r| (r[1].into(), r[2].into(), r[3].into())).collect();
    assert_eq!(keys[0], ("8".into(), "1".into(), "0".into()));
    assert_eq!(keys[11], ("12".into(), "2".into(), "2".into()));

    let details = std::fs::read_to_string(tmp.path().join("r/recover_details.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(details.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "header");
    assert_eq!(first["schema_version"], 1);
    assert_eq!(details.lines().count(), 13);
}

#[test]
fn single_inputs_recover_at_least_as_well_as_pairs() {
    let mut cfg = small_recover();
    cfg.seeds = (0..6).collect();
    let report = recover::run(&cfg);
    assert!(report.errors.is_empty());
    for &d in &cfg.recover.d_rec {
        assert!(report.cell_mean(d, 1).unwrap() >= report.cell_mean(d, 2).unwrap(), "d′={d}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_recover();
    let status = bin()
        .args([
            "recover",
            "--config",
            &write_config(tmp.path(), &cfg),
            "--seeds",
            "5",
            "--batch-sizes",
            "1",
            "--d-rec",
            "8",
        ])
        .arg("--out")
        .arg(tmp.path().join("r"))
        .status()
        .unwrap();
    assert!(status.success());
    let rows = csv_rows(&tmp.path().join("r/recover.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!((&rows[0][1], &rows[0][2], &rows[0][3]), ("8", "1", "5"));
}

#[test]
fn attack_summary_has_a_row_per_mode_and_batch_size() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["attack", "--config", &write_config(tmp.path(), &small_attack()), "--mode", "none,continuous_only"])
        .arg("--out")
        .arg(tmp.path().join("a"))
        .status()
        .unwrap();
    assert!(status.success());
    let summary = csv_rows(&tmp.path().join("a/attack_summary.csv"));
    let cells: Vec<(String, String)> = summary.iter().map(|r| (r[1].into(), r[2].into())).collect();
    assert_eq!(
        cells,
        [("1", "none"), ("1", "continuous_only"), ("2", "none"), ("2", "continuous_only")]
            .map(|(b, m)| (b.to_string(), m.to_string()))
    );
    assert_eq!(csv_rows(&tmp.path().join("a/attack_runs.csv")).len(), 12);
    let details = std::fs::read_to_string(tmp.path().join("a/attack_details.jsonl")).unwrap();
    let run: serde_json::Value = serde_json::from_str(details.lines().nth(1).unwrap()).unwrap();
    assert_eq!(run["kind"], "run");
    assert!(!run["run"]["traces"].as_array().unwrap().is_empty());
    assert!(run["run"]["examples"][0]["recovered"].is_string());
}

#[test]
fn seeds_are_independent_blocks() {
    let together = small_attack();
    let inputs = AttackInputs::load(&together).unwrap();
    let all = attack::run(&inputs, &together);
    assert_eq!(all.runs.iter().filter(|r| r.batch_size == 1 && r.mode == FeaturePhase::None).count(), 3);
    let alone = ExperimentConfig { seeds: vec![2], ..together.clone() };
    let one = attack::run(&inputs, &alone);
    for r in &one.runs {
        let same = all.runs.iter().find(|a| a.seed == 2 && a.batch_size == r.batch_size && a.mode == r.mode).unwrap();
        assert_eq!(serde_json::to_string(same).unwrap(), serde_json::to_string(r).unwrap());
    }
}

#[test]
fn eval_examples() {
    let r = eval::score_texts("a b c\n", "a c b\n").unwrap();
    assert_eq!((r.mean.r1, r.mean.r2, r.mean.r_l), (1.0, 0.0, 2.0 / 3.0));
    let same = eval::score_texts("x y z\nthe cat\n", "x y z\nthe cat\n").unwrap();
    assert_eq!((same.mean.r1, same.mean.r2, same.mean.r_l), (1.0, 1.0, 1.0));
    let disjoint = eval::score_texts("x y z\nthe cat\n", "p q\nr s t\n").unwrap();
    assert_eq!((disjoint.mean.r1, disjoint.mean.r2, disjoint.mean.r_l), (0.0, 0.0, 0.0));
    assert!(eval::score_texts("a\nb\n", "a\n").is_err());
}

#[test]
fn eval_command_prints_and_writes_scores() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("ref.txt"), "a b c\n").unwrap();
    std::fs::write(tmp.path().join("hyp.txt"), "a c b\n").unwrap();
    let out = bin()
        .arg("eval")
        .arg(tmp.path().join("ref.txt"))
        .arg(tmp.path().join("hyp.txt"))
        .arg("--out")
        .arg(tmp.path().join("eval.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean\t1.000\t0.000\t0.667"));
    assert_eq!(csv_rows(&tmp.path().join("eval.csv")).len(), 2);
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("ref.txt"), "a\nb\n").unwrap();
    std::fs::write(tmp.path().join("hyp.txt"), "a\n").unwrap();
    let mismatch = bin().arg("eval").arg(tmp.path().join("ref.txt")).arg(tmp.path().join("hyp.txt")).output().unwrap();
    assert!(!mismatch.status.success());

    std::fs::write(tmp.path().join("bad.json"), r#"{"seeds": [0], "no_such_field": 1}"#).unwrap();
    let bad = bin().args(["recover", "--config"]).arg(tmp.path().join("bad.json")).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_field"));

    // d′ larger than the Pooler input: every run fails and is recorded
    let mut cfg = small_recover();
    cfg.recover.d_rec = vec![41];
    cfg.recover.batch_sizes = vec![1];
    cfg.seeds = vec![0];
    let out = tmp.path().join("r");
    let failed =
        bin().args(["recover", "--config", &write_config(tmp.path(), &cfg), "--out"]).arg(&out).output().unwrap();
    assert!(!failed.status.success());
    let details = std::fs::read_to_string(out.join("recover_details.jsonl")).unwrap();
    assert!(details.lines().any(|l| l.contains("\"kind\":\"error\"")));
}

#[test]
fn list_parsing() {
    assert_eq!(parse_list::<u64>("1,2, 3").unwrap(), vec![1, 2, 3]);
    assert!(parse_list::<u64>("1,x").is_err());
    assert_eq!(parse_list::<FeaturePhase>("none,both").unwrap(), vec![FeaturePhase::None, FeaturePhase::Both]);
}
