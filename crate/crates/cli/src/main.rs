use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use phenoscope::report::{render_plots, run_pipeline, simulate, CohortStatus, PipelineConfig, PipelineError};
use phenoscope::CohortName;

#[derive(Parser)]
#[command(name = "phenoscope", version, about = "Explainable random-forest phenotyping of body-composition cohorts")]
struct Cli {
    /// Worker threads for forest fitting and attribution (default: all cores).
    #[arg(long, global = true, env = "PHENOSCOPE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full analysis on a cohort table.
    Run {
        /// Cohort CSV; falls back to `input` in the config.
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSON config; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; falls back to `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of all, lean, overweight, obese.
        #[arg(long, value_delimiter = ',')]
        cohorts: Option<Vec<CohortName>>,
        /// Master seed, overriding the config.
        #[arg(long, env = "PHENOSCOPE_SEED")]
        seed: Option<u64>,
    },
    /// Generate a synthetic cohort with planted ground truth.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from a finished run directory.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

/// An error plus the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

fn invalid(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn run(
    input: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    cohorts: Option<Vec<CohortName>>,
    seed: Option<u64>,
) -> Result<u8, Failure> {
    let mut cfg = match &config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(cohorts) = cohorts {
        cfg.cohorts = cohorts;
    }
    cfg.validate()?;
    let input = input
        .or_else(|| cfg.input.clone())
        .ok_or_else(|| invalid(anyhow!("no input: pass --input or set `input` in the config")))?;
    let out = out
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| invalid(anyhow!("no output directory: pass --out or set `output` in the config")))?;

    let report = run_pipeline(&cfg, &input, &out)?;
    for c in &report.cohorts {
        match c.status {
            CohortStatus::Ok => {
                let auc = c.auc.as_ref().map_or("-", |a| a.display.as_str());
                let k = c.clustering.as_ref().map_or(0, |k| k.k);
                println!("{:<11} ok       n={:<6} AUC {auc}  k={k}", c.cohort.as_str(), c.n_records);
            }
            CohortStatus::Skipped => println!(
                "{:<11} skipped  {}",
                c.cohort.as_str(),
                c.reason.as_deref().unwrap_or("")
            ),
            CohortStatus::Failed => println!(
                "{:<11} failed   at {}: {}",
                c.cohort.as_str(),
                c.failed_stage.as_deref().unwrap_or("?"),
                c.reason.as_deref().unwrap_or("")
            ),
        }
    }
    println!("report: {}", out.join("report.json").display());
    Ok(report.exit_code() as u8)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")
            .map_err(invalid)?;
    }
    match cli.command {
        Command::Run {
            input,
            config,
            out,
            cohorts,
            seed,
        } => run(input, config, out, cohorts, seed),
        Command::Simulate { manifest, out } => {
            let (cohort, truth) = simulate(&manifest, &out)?;
            println!(
                "wrote {} records ({} cases, prevalence {:.3}) to {}",
                cohort.len(),
                cohort.n_cases(),
                truth.realized_prevalence,
                out.display()
            );
            Ok(0)
        }
        Command::Plot { report } => {
            let summary = render_plots(&report)?;
            for f in &summary.written {
                println!("wrote {f}");
            }
            for n in &summary.notes {
                eprintln!("note: {n}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
