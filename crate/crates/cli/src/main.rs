use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bosdf::harness::experiment::{sweep_csv, ExperimentResult};
use bosdf::harness::{preset, run_experiment, summarize_dir, sweep, verify, Config, RunConfig, Summary, PRESET_NAMES};
use clap::{Args, Parser, Subcommand};

/// Bayesian optimization experiments with stochastic delayed feedback.
#[derive(Parser, Debug)]
#[command(name = "bosdf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// `key=value` override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the resolved configuration and exit without running.
    #[arg(long)]
    dry_run: bool,

    /// Any config key as a flag: `--delay.mean 3` or `--delay.mean=3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    flags: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured rule on every seed of a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a named preset.
    Preset {
        /// One of the preset names (see `bosdf presets`).
        name: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List preset names.
    Presets,
    /// Aggregate `<method>/seed<k>.csv` logs under a directory.
    Summarize { dir: PathBuf },
    /// Repeat an experiment for each value of one key.
    Sweep {
        /// Key to vary, e.g. `delay.mean` or `m`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Base config file; defaults to the `synthetic-stochastic` preset.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Numerical self-checks for a preset.
    Verify { preset: String },
}

/// Applies overrides and key flags; returns whether this is a dry run.
fn apply(cfg: &mut Config, o: &Overrides) -> Result<bool> {
    let mut dry_run = o.dry_run;
    for spec in &o.overrides {
        cfg.apply_override(spec)?;
    }
    let mut it = o.flags.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("unexpected argument '{flag}' (use --KEY VALUE)");
        };
        if key == "dry-run" {
            dry_run = true;
        } else if key == "override" {
            let spec = it.next().context("--override needs KEY=VALUE")?;
            cfg.apply_override(spec)?;
        } else if let Some(spec) = key.strip_prefix("override=") {
            cfg.apply_override(spec)?;
        } else if let Some((k, v)) = key.split_once('=') {
            cfg.set(k, v)?;
        } else {
            let v = it.next().with_context(|| format!("--{key} needs a value"))?;
            cfg.set(key, v)?;
        }
    }
    Ok(dry_run)
}

fn print_final(summary: &Summary) {
    println!("{:<12} {:>5} {:>22} {:>22}", "method", "runs", "final simple (se)", "final cumulative (se)");
    for m in &summary.methods {
        let p = m.last();
        println!(
            "{:<12} {:>5} {:>13.5} ({:.5}) {:>13.4} ({:.4})",
            m.method, m.runs, p.simple_mean, p.simple_stderr, p.cum_mean, p.cum_stderr
        );
    }
}

fn execute(cfg: &Config, dry_run: bool) -> Result<()> {
    let rc = RunConfig::from_config(cfg)?;
    if dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let result: ExperimentResult = run_experiment(&rc)?;
    print_final(&result.summary);
    if let Some(out) = &rc.output {
        println!("wrote {}", out.join(&rc.name).display());
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = Config::load(&config)?;
            let dry_run = apply(&mut cfg, &overrides)?;
            execute(&cfg, dry_run)
        }
        Command::Preset { name, overrides } => {
            let mut cfg = preset(&name)?;
            let dry_run = apply(&mut cfg, &overrides)?;
            execute(&cfg, dry_run)
        }
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
        Command::Summarize { dir } => {
            let summary = summarize_dir(&dir)?;
            std::fs::write(dir.join("summary.csv"), summary.to_csv())
                .with_context(|| format!("writing {}", dir.join("summary.csv").display()))?;
            std::fs::write(dir.join("final.csv"), summary.final_csv())
                .with_context(|| format!("writing {}", dir.join("final.csv").display()))?;
            print_final(&summary);
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            config,
            preset: preset_name,
            overrides,
        } => {
            let mut cfg = match (config, preset_name) {
                (Some(path), _) => Config::load(&path)?,
                (None, Some(name)) => preset(&name)?,
                (None, None) => preset("synthetic-stochastic")?,
            };
            let dry_run = apply(&mut cfg, &overrides)?;
            if dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let points = sweep(&cfg, &param, &values)?;
            print!("{}", sweep_csv(&param, &points));
            Ok(())
        }
        Command::Verify { preset } => {
            let checks = verify(&preset)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.pass);
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
