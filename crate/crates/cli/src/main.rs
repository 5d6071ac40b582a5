use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use krflab::config::ExperimentConfig;
use krflab::presets;
use krflab::RunSummary;

#[derive(Parser)]
#[command(name = "krflab", version, about = "Radial Kähler–Ricci flow experiments")]
struct Cli {
    /// Multiply grid resolution and divide the time step by K.
    #[arg(long, global = true, default_value_t = 1, value_name = "K")]
    grid_refine: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in experiment.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in experiments.
    ListPresets,
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output.directory.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn print_summary(s: &RunSummary) {
    for r in &s.reports {
        let status = match r.skip_reason() {
            Some(reason) => format!("skipped ({reason})"),
            None if r.holds() => "holds".into(),
            None => "FAILS".into(),
        };
        let margin = r.margin.map(|m| format!("  margin {m:.3e}")).unwrap_or_default();
        println!("{:<24} {status}{margin}", r.theorem);
    }
    println!("artifacts in {}", s.dir.display());
}

fn execute(cli: Cli) -> Result<Option<RunSummary>> {
    match cli.command {
        Command::ListPresets => {
            for (name, description) in presets::list_presets() {
                println!("{name:<18} {description}");
            }
            Ok(None)
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let dir = out_dir(&cfg, out);
            Ok(Some(krflab::run(&cfg, &dir, base, cli.grid_refine)?))
        }
        Command::Preset { name, out, seed } => {
            let preset = presets::find(&name).with_context(|| format!("unknown preset `{name}`; see list-presets"))?;
            let mut cfg = preset.config();
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dir = out_dir(&cfg, out);
            Ok(Some(krflab::run(&cfg, &dir, Path::new("."), cli.grid_refine)?))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(summary)) => {
            print_summary(&summary);
            if summary.failures().is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
