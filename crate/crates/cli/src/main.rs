use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lrlens::predictor::CvScheme;
use lrlens::train::Method;
use lrlens::Result;
use lrlens_cli::output::{Layout, Provenance};
use lrlens_cli::{config, experiment, manifest, predict, report, Context, ExperimentConfig, Selection};

#[derive(Parser)]
#[command(name = "lrlens", version, about = "Geometry, spectral and representation diagnostics for low-rank pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(clap::Args)]
struct Selectors {
    #[command(flatten)]
    config: ConfigArg,
    /// Restrict to these sizes (repeatable).
    #[arg(long = "size")]
    sizes: Vec<String>,
    /// Restrict to these methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<Method>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Loso,
    Lomo,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Print or check experiment configs.
    Config {
        /// Dump every default as a loadable config.
        #[arg(long)]
        print_defaults: bool,
        /// Validate a config, listing every violation.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Train every configured (size, method) run.
    Train(Selectors),
    /// Random-direction loss landscapes.
    Landscape(Selectors),
    /// Landscapes along top singular directions.
    Pca(Selectors),
    /// Consecutive and inter-method barrier heights.
    Interp(Selectors),
    /// Weight and update spectra.
    Spectra(Selectors),
    /// Hidden-state comparison against the full-rank run.
    Activations(Selectors),
    /// Fit the downstream-score predictor.
    Predict {
        /// Experiment config; features are assembled from its outputs.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Features CSV (instead of a config).
        #[arg(long, requires = "target")]
        features: Option<PathBuf>,
        /// Target CSV keyed by method,size,step.
        #[arg(long, requires = "features")]
        target: Option<PathBuf>,
        /// Output directory for --features/--target mode.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        scheme: SchemeArg,
    },
    /// Figures, table index and manifest for an experiment directory.
    Report {
        #[arg(long, short, conflicts_with = "dir")]
        config: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Re-check an experiment directory against its manifest.
    Verify {
        dir: PathBuf,
        /// Also require the manifest to match this config.
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Everything from training to report.
    Run(ConfigArg),
}

fn context(path: &PathBuf) -> Result<Context> {
    Context::new(config::load(path)?)
}

fn selection(s: &Selectors) -> Selection {
    Selection { sizes: s.sizes.clone(), methods: s.methods.clone() }
}

fn schemes(s: SchemeArg) -> Option<Vec<CvScheme>> {
    match s {
        SchemeArg::Loso => Some(vec![CvScheme::Loso]),
        SchemeArg::Lomo => Some(vec![CvScheme::Lomo]),
        SchemeArg::Both => None,
    }
}

fn metric(s: &Selectors, f: fn(&Context, &Selection) -> Result<()>) -> Result<()> {
    let ctx = context(&s.config.config)?;
    f(&ctx, &selection(s))?;
    println!("wrote metrics under {}", ctx.layout.root.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { print_defaults, check } => {
            if print_defaults {
                print!("{}", ExperimentConfig::defaults_toml());
            }
            if let Some(p) = &check {
                let ctx = context(p)?;
                println!("ok config_hash={}", ctx.prov.config_hash);
            }
            if !print_defaults && check.is_none() {
                return Err(lrlens::Error::Config(vec!["config: pass --print-defaults or --check <file>".into()]));
            }
            Ok(())
        }
        Command::Train(s) => {
            let ctx = context(&s.config.config)?;
            let runs = experiment::cmd_train(&ctx, &selection(&s))?;
            for (size, r) in &runs {
                let (first, last) = (r.checkpoints.first(), r.checkpoints.last());
                if let (Some(a), Some(b)) = (first, last) {
                    println!("{size}/{}: {} checkpoints, val loss {:.4} -> {:.4}", r.method, r.checkpoints.len(), a.val_loss, b.val_loss);
                }
            }
            Ok(())
        }
        Command::Landscape(s) => metric(&s, experiment::cmd_landscape),
        Command::Pca(s) => metric(&s, experiment::cmd_pca),
        Command::Interp(s) => metric(&s, experiment::cmd_interp),
        Command::Spectra(s) => metric(&s, experiment::cmd_spectra),
        Command::Activations(s) => metric(&s, experiment::cmd_activations),
        Command::Predict { config, features, target, out, scheme } => {
            let reports = match (config, features, target) {
                (Some(c), None, None) => predict::cmd_predict(&context(&c)?, schemes(scheme).as_deref())?,
                (None, Some(f), Some(t)) => {
                    let (prov, rows): (Provenance, _) = predict::read_features(&f)?;
                    let targets = predict::read_targets(&t)?;
                    let s = schemes(scheme).unwrap_or_else(|| predict::available_schemes(&rows));
                    predict::fit_and_write(&Layout::new(out), &prov, &rows, &targets, &s)?
                }
                _ => {
                    return Err(lrlens::Error::Config(vec![
                        "predict: pass either --config or both --features and --target".into(),
                    ]))
                }
            };
            for (s, r) in reports {
                println!(
                    "{}: pearson {:.4} spearman {:.4} on {} features",
                    s.name(),
                    r.result.pearson,
                    r.result.spearman,
                    r.result.features.len()
                );
            }
            Ok(())
        }
        Command::Report { config, dir } => {
            let root = match (config, dir) {
                (Some(c), _) => config::load(&c)?.output_dir(),
                (None, Some(d)) => d,
                (None, None) => return Err(lrlens::Error::Config(vec!["report: pass --config or --dir".into()])),
            };
            let summary = report::cmd_report(&root)?;
            for f in &summary.index.figures {
                println!("figure {f}");
            }
            println!("manifest {}", summary.manifest_hash);
            Ok(())
        }
        Command::Verify { dir, config } => {
            let expected = config.map(|c| context(&c)).transpose()?.map(|c| c.prov.config_hash);
            let m = manifest::verify(&dir, expected.as_deref())?;
            println!("ok: {} files match config {}", m.files.len(), m.config_hash);
            Ok(())
        }
        Command::Run(c) => {
            let ctx = context(&c.config)?;
            let hash = lrlens_cli::run_pipeline(&ctx)?;
            println!("manifest {hash}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = lrlens_cli::workers_from_env().and_then(|w| lrlens_cli::with_workers(w, || run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
