//! Experiment orchestration for the `lrlens` command-line tool.
//!
//! Each command reads a config, checks its prerequisite artifacts and
//! writes its outputs under the experiment directory. Independent jobs
//! run on a pool whose size comes from `LRLENS_WORKERS`.

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod output;
pub mod predict;
pub mod report;
pub mod svg;

use lrlens::{Error, Result};

pub use config::{load, ExperimentConfig, Loaded};
pub use experiment::{Context, Selection};

pub const WORKERS_ENV: &str = "LRLENS_WORKERS";

/// Pool size from `LRLENS_WORKERS`, or `None` for the rayon default.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(vec![format!("{WORKERS_ENV}={v:?} must be a positive integer")])),
        },
    }
}

/// Runs `f` on a pool bounded by `workers`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    pool.install(f)
}

/// Trains every run, computes every enabled metric, fits the predictor and
/// writes the report. Returns the manifest hash.
pub fn run_pipeline(ctx: &Context) -> Result<String> {
    let all = Selection::default();
    let m = &ctx.config().metrics;
    experiment::cmd_train(ctx, &all)?;
    if m.landscape {
        experiment::cmd_landscape(ctx, &all)?;
    }
    if m.pca {
        experiment::cmd_pca(ctx, &all)?;
    }
    if m.interp {
        experiment::cmd_interp(ctx, &all)?;
    }
    if m.spectra {
        experiment::cmd_spectra(ctx, &all)?;
    }
    if m.activations {
        experiment::cmd_activations(ctx, &all)?;
    }
    if m.interp && m.spectra && m.activations {
        predict::cmd_predict(ctx, None)?;
    }
    Ok(report::cmd_report(&ctx.layout.root)?.manifest_hash)
}
