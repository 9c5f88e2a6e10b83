//! Command-line experiment runner for the poisoning laboratory.
//!
//! Each subcommand resolves one JSON experiment config (defaults apply
//! when `--config` is omitted), runs its stage, and writes artifacts plus
//! a `manifest.json` under `<out>/<subcommand>/`.  The dataset root comes
//! from the config, the `POISONFORGE_DATA` environment variable, or
//! `data/mnist`, in that order.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poisonforge::runner::{
    apply_overrides, cmd_attack, cmd_defend, cmd_report, cmd_study, cmd_sweep, cmd_train_clean,
    load_config, parse_attack_kind, Overrides, RunManifest, RunnerError,
};

#[derive(Parser)]
#[command(
    name = "poisonforge",
    version,
    about = "Data-poisoning laboratory: craft poisons, train victims, filter, evaluate"
)]
struct Cli {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root RNG seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for independent sweep cells.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    parallel: usize,

    /// Attack kind override: patch | blend | feature_collision | deep_poison.
    #[arg(long, global = true, value_name = "KIND")]
    attack: Option<String>,

    /// Poison ratio override.
    #[arg(long, global = true, value_name = "R")]
    ratio: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean classifier and report its test accuracy.
    TrainClean,
    /// Craft poisons, train the victim, and measure attack success.
    Attack,
    /// Scan and filter the poisoned training set, retrain, and compare.
    Defend,
    /// Sweep the poison ratio over a grid of seeds.
    Sweep,
    /// Relate donor-class similarity to attack success.
    Study,
    /// Render sample grids, perturbation echo, and the logit t-test.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.map(|p| p.display().to_string()),
        attack: cli
            .attack
            .as_deref()
            .map(parse_attack_kind)
            .transpose()?,
        ratio: cli.ratio,
    };
    apply_overrides(&mut cfg, &overrides);

    let manifest = match cli.command {
        Command::TrainClean => cmd_train_clean(&cfg)?,
        Command::Attack => cmd_attack(&cfg)?,
        Command::Defend => cmd_defend(&cfg)?,
        Command::Sweep => cmd_sweep(&cfg, cli.parallel)?,
        Command::Study => cmd_study(&cfg)?,
        Command::Report => cmd_report(&cfg)?,
    };
    print_summary(&manifest);
    Ok(())
}

fn print_summary(manifest: &RunManifest) {
    for metrics in &manifest.metrics {
        println!(
            "{}: acc={:.4} asr={:.4} ({}/{} correct, {} attacked)",
            metrics.trigger,
            metrics.acc,
            metrics.asr,
            metrics.n_correct,
            metrics.n_total,
            metrics.n_att
        );
    }
    for stage in &manifest.stages {
        println!("stage {}: {:.2}s", stage.stage, stage.seconds);
    }
    if let Some(path) = manifest.files.last() {
        println!("manifest: {path}");
    }
}
