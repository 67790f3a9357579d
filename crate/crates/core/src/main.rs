use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use guidance_lab::config::{ExperimentConfig, ExperimentKind};
use guidance_lab::experiments;

/// Runs one guidance experiment from a JSON config.
#[derive(Debug, Parser)]
#[command(name = "guidance-lab", version)]
struct Cli {
    /// verify, trace_divergence, sweep_beta, sweep_omega or sample_compare
    kind: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the experiment and sampler seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.sampler.seed = seed;
    }
    if let Err(e) = cfg.validate(cli.kind) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out = cli.out.unwrap_or_else(|| cfg.output_dir.clone());
    match experiments::run(cli.kind, &cfg, &out) {
        Ok(report) => {
            for c in &report.checks {
                let status = match (c.passed, c.gated) {
                    (true, _) => "ok",
                    (false, true) => "FAIL",
                    (false, false) => "note",
                };
                println!("{status:>4}  {}  measured={:.3e} tol={:.3e}", c.name, c.measured, c.tolerance);
            }
            for a in &report.artifacts {
                println!("wrote {}", out.join(a).display());
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
