use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poolerleak::FeaturePhase;
use poolerleak_cli::attack::{self, AttackInputs, AttackReport};
use poolerleak_cli::config::parse_list;
use poolerleak_cli::{eval, recover, with_workers, ExperimentConfig};

#[derive(Parser)]
#[command(name = "poolerleak", version, about = "Pooler-feature recovery and text-inversion experiments")]
struct Cli {
    /// Worker threads (all cores when omitted). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated batch sizes, overriding the config.
    #[arg(long)]
    batch_sizes: Option<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_list(s)?;
        }
        if let Some(b) = &self.batch_sizes {
            let b: Vec<usize> = parse_list(b)?;
            cfg.recover.batch_sizes = b.clone();
            cfg.attack.batch_sizes = b;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Feature-recovery sweep over d′, batch size and seed.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Comma-separated recovered dimensions.
        #[arg(long)]
        d_rec: Option<String>,
    },
    /// Text recovery under each feature-phase mode.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Comma-separated feature-phase modes: none, discrete_only,
        /// continuous_only, both.
        #[arg(long)]
        mode: Option<String>,
    },
    /// ROUGE of aligned reference and hypothesis files.
    Eval {
        reference: PathBuf,
        hypothesis: PathBuf,
        /// Also write per-line scores to this CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Small end-to-end run on the bundled data.
    Demo {
        #[arg(long, default_value = "out/demo")]
        out: PathBuf,
    },
}

fn print_summary(report: &AttackReport) {
    println!("B\tmode\truns\tR-1\tR-2\tR-L\tΔR-1\tfeat|cos|");
    for s in report.summary() {
        let delta = s.delta_r1_vs_none.map_or("-".into(), |d| format!("{:+.3}", d));
        println!(
            "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{}\t{:.3}",
            s.batch_size, s.mode, s.runs, s.r1, s.r2, s.r_l, delta, s.feature_quality
        );
    }
}

fn run_recover(cfg: &ExperimentConfig, out: &std::path::Path, workers: Option<usize>) -> anyhow::Result<usize> {
    let report = with_workers(workers, || recover::run(cfg))?;
    recover::write(&report, cfg, out)?;
    println!("d'\tB\tmean|cos|");
    for &d in &cfg.recover.d_rec {
        for &b in &cfg.recover.batch_sizes {
            if let Some(q) = report.cell_mean(d, b) {
                println!("{d}\t{b}\t{q:.4}");
            }
        }
    }
    Ok(report.errors.len())
}

fn run_attack(cfg: &ExperimentConfig, out: &std::path::Path, workers: Option<usize>) -> anyhow::Result<usize> {
    let inputs = AttackInputs::load(cfg)?;
    let report = with_workers(workers, || attack::run(&inputs, cfg))?;
    attack::write(&report, cfg, out)?;
    print_summary(&report);
    Ok(report.errors.len())
}

fn demo(out: &std::path::Path, workers: Option<usize>) -> anyhow::Result<usize> {
    let mut cfg = ExperimentConfig { seeds: vec![0, 1], ..Default::default() };
    cfg.recover.vocab_size = 5_050;
    cfg.recover.d = 50;
    cfg.recover.d_rec = vec![16];
    cfg.recover.batch_sizes = vec![1, 2];
    cfg.attack.batch_sizes = vec![2];
    cfg.attack.search.continuous_steps = 150;
    println!("== feature recovery ==");
    let mut errors = run_recover(&cfg, &out.join("recover"), workers)?;
    println!("\n== text recovery ==");
    let inputs = AttackInputs::load(&cfg)?;
    let report = with_workers(workers, || attack::run(&inputs, &cfg))?;
    attack::write(&report, &cfg, &out.join("attack"))?;
    print_summary(&report);
    for run in report.runs.iter().filter(|r| r.seed == 0) {
        for ex in &run.examples {
            println!("[{}] {:?} -> {:?}", run.mode, ex.reference, ex.recovered);
        }
    }
    errors += report.errors.len();
    Ok(errors)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Recover { common, d_rec } => common.load().and_then(|mut cfg| {
            if let Some(d) = d_rec {
                cfg.recover.d_rec = parse_list(&d)?;
            }
            run_recover(&cfg, &common.out, cli.workers)
        }),
        Command::Attack { common, mode } => common.load().and_then(|mut cfg| {
            if let Some(m) = mode {
                cfg.attack.modes = parse_list::<FeaturePhase>(&m)?;
            }
            run_attack(&cfg, &common.out, cli.workers)
        }),
        Command::Eval { reference, hypothesis, out } => eval::score_files(&reference, &hypothesis).and_then(|r| {
            eval::print(&r);
            if let Some(o) = out {
                eval::write(&r, &reference, &hypothesis, &o)?;
            }
            Ok(0)
        }),
        Command::Demo { out } => demo(&out, cli.workers),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("error: {n} run(s) failed; see the error records in the output");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
