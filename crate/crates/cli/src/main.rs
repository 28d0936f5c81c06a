use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpa_core::harness::{self, ExperimentConfig, Precision, Report};
use mpa_core::MpaError;

/// Episodes may fail (e.g. a non-finite loss); above this share the run exits with status 3.
const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Parser)]
#[command(name = "mpa", version, about = "Multi-view progressive adaptation on synthetic few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt on each episode and report held-out mIoU.
    Adapt(Common),
    /// Evaluate the initial encoder without adaptation.
    Eval(Common),
    /// Per-level and per-chain-position IoU tables with ordering verdicts.
    Prelim(Common),
    /// Run every ablation cell on shared episodes.
    Ablate(Common),
    /// Write domain specs and sample images.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Samples written per domain.
        #[arg(long, default_value_t = 4)]
        per_domain: usize,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, MpaError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        match self.precision.as_deref() {
            Some("64") => cfg.precision = Precision::F64,
            Some(_) => cfg.precision = Precision::F32,
            None => {}
        }
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn worst_failure_rate(report: &Report) -> f64 {
    let cells = report.ablation.iter().flat_map(|t| &t.cells).map(|c| {
        let n = c.episodes.len();
        if n == 0 {
            0.0
        } else {
            c.episodes_failed as f64 / n as f64
        }
    });
    cells.fold(report.summary.failure_rate(), f64::max)
}

fn print_report(report: &Report) {
    let s = &report.summary;
    println!(
        "{}: mIoU {:.2} ± {:.2} over {} episodes ({} failed), {:.1}s",
        report.command, s.miou_mean, s.miou_std, s.episodes_ok, s.episodes_failed, report.wall_clock_seconds
    );
    if let Some(t) = &report.ablation {
        for c in &t.cells {
            println!("  {:<14} {:6.2} ± {:5.2}  {}", c.name, c.miou_mean, c.miou_std, c.description);
        }
    }
    for v in report.verdicts() {
        println!("  [{}] {}: {}", if v.pass { "pass" } else { "FAIL" }, v.name, v.detail);
    }
}

fn run(cli: Cli) -> Result<ExitCode, MpaError> {
    let report = match cli.command {
        Command::Adapt(c) => harness::run_adaptation(&c.load()?)?,
        Command::Eval(c) => harness::run_evaluation(&c.load()?)?,
        Command::Prelim(c) => harness::run_preliminary_tables(&c.load()?)?,
        Command::Ablate(c) => harness::run_ablations(&c.load()?)?,
        Command::GenData { common, per_domain } => {
            let cfg = common.load()?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            let files = harness::generate_data(&cfg, &dir, per_domain)?;
            println!("wrote {} files under {}", files.len(), dir.display());
            return Ok(ExitCode::SUCCESS);
        }
    };
    print_report(&report);
    if worst_failure_rate(&report) > MAX_FAILURE_RATE {
        eprintln!("error: more than {:.0}% of episodes failed", MAX_FAILURE_RATE * 100.0);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, MpaError::Config(_)) { 2 } else { 1 })
        }
    }
}
