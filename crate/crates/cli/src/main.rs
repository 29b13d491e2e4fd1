use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use usonic::experiment::{
    replay_frames, run_oa_experiment, run_velocity_benchmark, ExperimentConfig, ExperimentKind, SensorSelection,
};
use usonic::oa::NoiseFloor;
use usonic::oracle::run_oracle_checks;
use usonic::signal::read_frame_log;
use usonic::velocity::Method;
use usonic::SPEED_OF_SOUND;

#[derive(Parser)]
#[command(name = "usonic", version, about = "Ultrasonic velocity estimation and obstacle-avoidance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Seeded obstacle-avoidance flights in a scene.
    OaRun(RunArgs),
    /// Velocity benchmark: ultrasonic, optical flow and fused tracks.
    VelBench(RunArgs),
    /// Geometry and estimator self-checks; fails on any violated check.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random cases per check.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Runs a logged frame file through the estimators.
    Replay {
        /// Frame log, one JSON frame per line.
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        /// Fixed noise floor for avoidance frames, ADC counts.
        #[arg(long, default_value_t = 20.0)]
        noise_floor: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Built-in scene name or scene file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    sensor: Option<String>,
}

impl RunArgs {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => match kind {
                ExperimentKind::Oa => ExperimentConfig::default(),
                ExperimentKind::Velocity => ExperimentConfig::velocity("table"),
            },
        };
        if cfg.kind != kind {
            bail!("config describes a {:?} experiment", cfg.kind);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.n_runs = runs;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(preset) = &self.preset {
            cfg.preset = preset.clone();
        }
        if let Some(scenario) = &self.scenario {
            cfg.scenario = scenario.clone();
        }
        if let Some(sensor) = &self.sensor {
            cfg.sensor = sensor.parse::<SensorSelection>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn finish(summary: &str, dir: &Path) {
    print!("{summary}");
    println!("outputs in {}", dir.display());
}

fn replay(log: &Path, config: Option<&Path>, out: Option<&Path>, method: Option<Method>, noise_floor: f64) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = method {
        cfg.estimator.method = m;
    }
    let file = File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let frames = read_frame_log(BufReader::new(file))?;
    let report = replay_frames(&frames, &cfg, NoiseFloor::fixed(noise_floor));
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("replay_out"));
    report.write(&dir)?;
    finish(&report.summary_text(), &dir);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::OaRun(args) => {
            let cfg = args.config(ExperimentKind::Oa)?;
            let report = run_oa_experiment(&cfg)?;
            let dir = out_dir(&cfg, "oa_out");
            report.write(&dir)?;
            finish(&report.summary_text(), &dir);
        }
        Command::VelBench(args) => {
            let cfg = args.config(ExperimentKind::Velocity)?;
            let report = run_velocity_benchmark(&cfg)?;
            let dir = out_dir(&cfg, "vel_out");
            report.write(&dir)?;
            finish(&report.summary_text(), &dir);
        }
        Command::OracleCheck { seed, cases } => {
            let checks = run_oracle_checks(seed, cases)?;
            let mut ok = true;
            for c in &checks {
                let tag = match c.passed {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "INFO",
                };
                println!("{tag} {:<28} {}", c.name, c.detail);
                ok &= !c.failed();
            }
            println!("c0 = {SPEED_OF_SOUND} m/s");
            return Ok(ok);
        }
        Command::Replay {
            log,
            config,
            out,
            method,
            noise_floor,
        } => replay(&log, config.as_deref(), out.as_deref(), method, noise_floor)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
