//! Experiment runner behind the `poolerleak` command.

pub mod attack;
pub mod config;
pub mod eval;
pub mod output;
pub mod recover;

pub use config::ExperimentConfig;

/// Runs `f` on a pool of `workers` threads (rayon's default when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.unwrap_or(0)).build()?;
    Ok(pool.install(f))
}
