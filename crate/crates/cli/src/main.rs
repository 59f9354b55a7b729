//! `omnivcr` command-line front end.
//!
//! Logs go to stderr; machine-readable output (CSV, JSON summaries) goes to
//! stdout or the file named by `--out`. All angles on the command line are
//! in degrees; poses are `x,y,z,roll,pitch,yaw` or 12 numbers (the rotation
//! row-major, then the translation).

mod bench;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "omnivcr", version, about = "Dual-fisheye virtual camera rotation toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Fisheye image width W in pixels.
    #[arg(long, global = true, default_value_t = 128)]
    pub resolution: usize,
    /// Rays per pixel along each axis when rendering.
    #[arg(long, global = true, default_value_t = omnivcr::render::DEFAULT_SUPERSAMPLING,
          value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..=8))]
    pub supersample: usize,
    /// `equidistant` or a path to a two-column theta/radius table.
    #[arg(long, global = true, default_value = "equidistant")]
    pub projection: String,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rotate a dual-fisheye frame and write an original/rotated/difference triptych.
    Rotate(commands::RotateArgs),
    /// Augment a wheeled-robot dataset with random virtual camera rotations.
    Augment(commands::AugmentArgs),
    /// Render a synthetic scene to a dual-fisheye frame.
    Render(commands::RenderArgs),
    /// Run one closed-loop servo trial against the scene renderer.
    Servo(commands::ServoArgs),
    /// Summarize servo traces into success rate and mean errors.
    Eval(commands::EvalArgs),
    /// Time the core image operations.
    Bench(bench::BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Env,
    Full,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    let global = cli.global.clone();
    let result = omnivcr::par::with_workers(global.workers, move || match cli.command {
        Command::Rotate(a) => commands::rotate(&global, &a),
        Command::Augment(a) => commands::augment(&global, &a),
        Command::Render(a) => commands::render(&global, &a),
        Command::Servo(a) => commands::servo(&global, &a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => bench::run(&global, &a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Output path or stdout.
pub fn write_output(out: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
