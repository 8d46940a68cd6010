use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use shellflow::experiments::config::{ExperimentConfig, ExperimentKind};
use shellflow::experiments::report::{emit_report, OutputFormat};
use shellflow::experiments::run_experiment;
use shellflow::Error;

/// Spectral shell dynamics experiments.
#[derive(Debug, Parser)]
#[command(name = "shellflow", version)]
struct Cli {
    experiment: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&cli.config, Some(cli.experiment))?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let units = run_experiment(&cfg)?;
    let mut failures = Vec::new();
    for unit in &units {
        let dir = match unit.seed {
            Some(s) => out.join(format!("seed-{s}")),
            None => out.clone(),
        };
        // Each unit's report carries its own seed list.
        let unit_cfg = match unit.seed {
            Some(s) => cfg.clone().with_seed(s),
            None => cfg.clone(),
        };
        emit_report(&unit_cfg, &unit.artifacts, &dir, cli.format)?;
        for c in &unit.artifacts.checks {
            let value = c.value.map_or_else(|| "null".to_string(), |v| format!("{v:e}"));
            println!(
                "{} {:<34} {:>24} vs {:e}{}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                value,
                c.threshold,
                if c.gating { "" } else { "  (reported)" }
            );
            if c.gating && !c.passed {
                failures.push(format!("{}: {}", dir.display(), c.name));
            }
        }
    }
    println!("wrote {}", out.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failures.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shellflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
