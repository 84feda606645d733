//! `pbcert`: generate data, train priors and posteriors, certify them, and
//! run the self-bounded, baseline, sweep and VC experiments.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pbcert::checkpoint;
use pbcert::experiment::{
    certify_stage, comparison_row, posterior_stage, prepare_data, prior_stage, run_baseline_hoeffding,
    run_selfbounded, run_sigma_sweep, run_vc_curve, write_comparison_csv, write_sweep_csv, write_vc_csv,
    ExperimentConfig, StageTimings, DEFAULT_SIGMA_GRID,
};
use pbcert::synthdata::write_csv;
use pbcert::{NetworkArchitecture, PriorSpec, RunKind, RunReport};
use serde::Serialize;

use crate::config::RunArgs;

#[derive(Debug, Parser)]
#[command(name = "pbcert", version, about = "PAC-Bayesian performance certificates for stochastic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its split index sets
    GenData(RunArgs),
    /// Train the prior mean on the prefix set
    TrainPrior(RunArgs),
    /// Train the posterior on the base set, starting from a saved prior
    TrainPosterior {
        #[command(flatten)]
        run: RunArgs,
        /// Prior checkpoint [default: <out>/prior.pbck]
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Certify a saved posterior on the bound set
    Certify {
        #[command(flatten)]
        run: RunArgs,
        /// Prior checkpoint [default: <out>/prior.pbck]
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Posterior checkpoint [default: <out>/posterior.pbck]
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Full self-bounded run: prior, posterior, certificate, holdout metric
    Selfbound(RunArgs),
    /// Deterministic network with a Hoeffding holdout bound
    Baseline(RunArgs),
    /// One self-bounded run per prior scale, all sharing the seed
    SweepSigma {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated prior scales [default: 0.005,0.01,0.02,0.03,0.04,0.05]
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// VC generalization-gap bounds over parameter counts and sample sizes
    VcCurve {
        /// Comma-separated parameter counts
        #[arg(long, value_delimiter = ',', default_value = "100,10000,1000000,11000000")]
        params: Vec<u64>,
        /// Comma-separated sample sizes
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000,1000000,10000000")]
        m: Vec<u64>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Output directory
        #[arg(long, default_value = "pbcert-out")]
        out: PathBuf,
    },
    /// Tabulate self-bounded and baseline reports side by side
    Report {
        /// Report JSON files
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Re-run every report from its echoed config and require identical output
        #[arg(long)]
        verify: bool,
        /// Output directory
        #[arg(long, default_value = "pbcert-out")]
        out: PathBuf,
    },
}

/// Prints a line to stdout; a closed pipe surfaces as an error that `main`
/// treats as a normal exit.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*).context("[output] stdout")?
    };
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("[output] creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("[output] writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("[output] encoding JSON")?;
    text.push('\n');
    write_file(path, text)
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> pbcert::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).with_context(|| format!("[output] encoding {}", path.display()))?;
    write_file(path, buf)
}

fn write_report(dir: &Path, report: &RunReport, timings: &StageTimings) -> Result<()> {
    let mut text = report.to_json()?;
    text.push('\n');
    write_file(&dir.join("report.json"), text)?;
    write_json(&dir.join("timings.json"), timings)
}

fn load_prior(path: &Path, config: &ExperimentConfig) -> Result<PriorSpec> {
    let mean = checkpoint::load(path).with_context(|| format!("[load-prior] {}", path.display()))?;
    config.architecture().check_groups(&mean).context("[load-prior] architecture")?;
    Ok(PriorSpec::from_mean_network(
        &mean,
        NetworkArchitecture::is_stochastic_group,
        config.sigma_p,
    )?)
}

fn summary(report: &RunReport) -> String {
    let kind = match report.kind {
        RunKind::Selfbound => "certified",
        RunKind::Baseline => "hoeffding",
    };
    format!(
        "{} {kind} {} lower bound {:.4}{}; final-holdout {} {:.4}",
        report.config.task,
        report.metric_name,
        report.metric_lower_bound,
        if report.vacuous { " (vacuous)" } else { "" },
        report.metric_name,
        report.final_holdout_metric
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let config = args.resolve()?;
            let prepared = prepare_data(&config)?;
            create_dir(&args.out)?;
            write_with(&args.out.join("data.csv"), |w| write_csv(w, config.task, &prepared.data))?;
            write_json(&args.out.join("splits.json"), &prepared.splits)?;
            write_json(&args.out.join("config.json"), &config)?;
            say!("wrote {} examples to {}", prepared.data.len(), args.out.display());
        }
        Command::TrainPrior(args) => {
            let config = args.resolve()?;
            let prepared = prepare_data(&config)?;
            let prior = prior_stage(&config, &prepared)?;
            create_dir(&args.out)?;
            let path = args.out.join("prior.pbck");
            checkpoint::save(&path, &prior.mean_network()).context("[output] prior checkpoint")?;
            write_json(&args.out.join("config.json"), &config)?;
            say!("prior mean written to {}", path.display());
        }
        Command::TrainPosterior { run, prior } => {
            let config = run.resolve()?;
            let prior = load_prior(&prior.unwrap_or_else(|| run.out.join("prior.pbck")), &config)?;
            let prepared = prepare_data(&config)?;
            let posterior = posterior_stage(&config, &prepared, &prior)?;
            create_dir(&run.out)?;
            let path = run.out.join("posterior.pbck");
            checkpoint::save(&path, &posterior).context("[output] posterior checkpoint")?;
            write_json(&run.out.join("config.json"), &config)?;
            say!("posterior written to {}", path.display());
        }
        Command::Certify { run, prior, posterior } => {
            let config = run.resolve()?;
            let prior = load_prior(&prior.unwrap_or_else(|| run.out.join("prior.pbck")), &config)?;
            let posterior_path = posterior.unwrap_or_else(|| run.out.join("posterior.pbck"));
            let posterior =
                checkpoint::load(&posterior_path).with_context(|| format!("[load-posterior] {}", posterior_path.display()))?;
            let prepared = prepare_data(&config)?;
            let certified = certify_stage(&config, &prepared.data, &prepared.splits.bound, &prior, &posterior)?;
            create_dir(&run.out)?;
            write_json(&run.out.join("certificate.json"), &certified)?;
            say!(
                "risk <= {:.6}, {} >= {:.6} (KL {:.4e}, empirical risk {:.6}){}",
                certified.certificate.risk_upper,
                config.metric_name(),
                certified.certificate.metric_lower,
                certified.kl,
                certified.estimate.value,
                if certified.certificate.vacuous { " vacuous" } else { "" }
            );
        }
        Command::Selfbound(args) => {
            let config = args.resolve()?;
            let outcome = run_selfbounded(&config)?;
            create_dir(&args.out)?;
            write_report(&args.out, &outcome.report, &outcome.timings)?;
            checkpoint::save(args.out.join("prior.pbck"), &outcome.prior.mean_network())
                .context("[output] prior checkpoint")?;
            checkpoint::save(args.out.join("posterior.pbck"), &outcome.posterior)
                .context("[output] posterior checkpoint")?;
            say!("{}", summary(&outcome.report));
        }
        Command::Baseline(args) => {
            let config = args.resolve()?;
            let (report, timings) = run_baseline_hoeffding(&config)?;
            create_dir(&args.out)?;
            write_report(&args.out, &report, &timings)?;
            say!("{}", summary(&report));
        }
        Command::SweepSigma { run, grid } => {
            let config = run.resolve()?;
            let grid = if grid.is_empty() { DEFAULT_SIGMA_GRID.to_vec() } else { grid };
            let points = run_sigma_sweep(&config, &grid)?;
            create_dir(&run.out)?;
            let reports: Vec<&RunReport> = points.iter().map(|p| &p.report).collect();
            write_json(&run.out.join("sweep.json"), &reports)?;
            write_with(&run.out.join("sweep.csv"), |w| write_sweep_csv(w, &points))?;
            let shared = points.iter().all(|p| p.prior_checkpoint == points[0].prior_checkpoint);
            for p in &points {
                say!("sigma_p {:<6} {}", p.sigma_p, summary(&p.report));
            }
            say!("prior means identical across sweep: {shared}");
        }
        Command::VcCurve { params, m, delta, out } => {
            let cells = run_vc_curve(&params, &m, delta)?;
            create_dir(&out)?;
            write_with(&out.join("vc.csv"), |w| write_vc_csv(w, &cells))?;
            for c in &cells {
                say!(
                    "W {:>10}  m {:>10}  bound {:>10.4}{}",
                    c.param_count,
                    c.m,
                    c.bound,
                    if c.vacuous { "  vacuous" } else { "" }
                );
            }
        }
        Command::Report { reports, verify, out } => {
            let mut loaded = Vec::new();
            for path in &reports {
                let text = fs::read_to_string(path).with_context(|| format!("[report] reading {}", path.display()))?;
                let report = RunReport::from_json(&text).with_context(|| format!("[report] {}", path.display()))?;
                if verify {
                    let again = match report.kind {
                        RunKind::Selfbound => run_selfbounded(&report.config)?.report,
                        RunKind::Baseline => run_baseline_hoeffding(&report.config)?.0,
                    };
                    if again.to_json()?.trim_end() != text.trim_end() {
                        bail!("[verify] {} does not reproduce from its echoed config", path.display());
                    }
                    say!("{}: reproduced exactly", path.display());
                }
                loaded.push(report);
            }
            let mut rows = Vec::new();
            for sb in loaded.iter().filter(|r| r.kind == RunKind::Selfbound) {
                if let Some(bl) = loaded
                    .iter()
                    .find(|r| r.kind == RunKind::Baseline && r.config.task == sb.config.task)
                {
                    rows.push(comparison_row(sb, bl)?);
                }
            }
            for r in &loaded {
                say!("{}", summary(r));
            }
            if !rows.is_empty() {
                create_dir(&out)?;
                write_with(&out.join("comparison.csv"), |w| write_comparison_csv(w, &rows))?;
                say!("{:<10} {:<9} {:>16} {:>16}", "task", "metric", "self-bounded", "hoeffding");
                for r in &rows {
                    say!(
                        "{:<10} {:<9} {:>16.4} {:>16.4}",
                        r.task.to_string(),
                        r.metric_name,
                        r.selfbound_lower,
                        r.hoeffding_lower
                    );
                }
            }
        }
    }
    Ok(())
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            // Library errors already embed their source in the message, so
            // skip chain links whose text the previous link contains.
            let mut message = String::new();
            let mut previous = String::new();
            for link in err.chain() {
                let text = link.to_string();
                if !previous.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
                previous = text;
            }
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
