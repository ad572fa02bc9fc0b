//! Command-line front end: run scenarios, compute metrics from logs, and
//! train the value estimate on the integrator task.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Deserialize;

use deep_mpc::adaptive::{sample_unit_sign, train, write_learning_curve, TrainSetup};
use deep_mpc::harness::{
    compute_metrics, export_csv, export_plot_script, import_csv, run_scenario, ControllerKind,
    RunConfig, ScenarioSpec,
};
use deep_mpc::{Error, Result};

#[derive(Parser)]
#[command(name = "deep-mpc", about = "Adaptive robust MPC experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write the trajectory log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        controller: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated duration in seconds.
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
    },
    /// Compute metrics from an exported log CSV.
    Metrics {
        #[arg(long)]
        log: PathBuf,
    },
    /// Train the value estimate on the integrator task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: usize,
    },
}

#[derive(Deserialize)]
struct TrainFileConfig {
    out_dir: PathBuf,
    #[serde(default = "default_episode_length")]
    episode_length: usize,
    #[serde(default = "default_update_epochs")]
    update_epochs: usize,
    #[serde(default = "default_buffer_capacity")]
    buffer_capacity: usize,
    #[serde(default = "default_value_hidden")]
    value_hidden: usize,
    #[serde(default = "default_step_size")]
    step_size: f64,
    #[serde(default)]
    seed: u64,
}

fn default_episode_length() -> usize {
    30
}
fn default_update_epochs() -> usize {
    60
}
fn default_buffer_capacity() -> usize {
    300
}
fn default_value_hidden() -> usize {
    16
}
fn default_step_size() -> f64 {
    0.01
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidLink { .. } => "invalid_link",
        Error::IntegrationBlowUp { .. } => "integration_blow_up",
        Error::SingularControlMatrix => "singular_control_matrix",
        Error::RankDeficient => "rank_deficient",
        Error::NotPositiveDefinite(_) => "not_positive_definite",
        Error::Config(_) => "config",
        Error::Infeasible { .. } => "infeasible",
        Error::MaxIterations { .. } => "max_iterations",
        Error::EmptyLog(_) => "empty_log",
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
    }
}

fn cmd_run(
    scenario: PathBuf,
    controller: String,
    out: PathBuf,
    seed: u64,
    duration: f64,
) -> Result<()> {
    let kind: ControllerKind = controller.parse()?;
    let mut cfg = RunConfig::defaults(scenario.clone(), kind);
    cfg.seed = seed;
    cfg.duration = duration;
    let spec = ScenarioSpec::load(&scenario)?;
    let log = run_scenario(&cfg)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let stem = format!("scenario{}_{kind}", spec.scenario_id);
    let csv_name = format!("{stem}.csv");
    export_csv(&log, &out.join(&csv_name))?;
    export_plot_script(&log, &csv_name, &out.join(format!("{stem}.py")))?;
    if let Some(failure) = &log.failure {
        return Err(Error::Config(format!(
            "controller failed mid-run (log truncated): {failure}"
        )));
    }
    let metrics = compute_metrics(&log)?;
    println!(
        "{}",
        serde_json::json!({
            "scenario_id": spec.scenario_id,
            "controller": kind.to_string(),
            "records": log.records.len(),
            "metrics": metrics,
            "log": out.join(&csv_name).display().to_string(),
        })
    );
    Ok(())
}

fn cmd_metrics(log_path: PathBuf) -> Result<()> {
    let log = import_csv(&log_path)?;
    let metrics = compute_metrics(&log)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn cmd_train(config: PathBuf, episodes: usize) -> Result<()> {
    let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
        path: config.display().to_string(),
        source: e,
    })?;
    let file_cfg: TrainFileConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: config.display().to_string(),
        message: e.to_string(),
    })?;
    let setup = TrainSetup {
        episodes,
        episode_length: file_cfg.episode_length,
        buffer_capacity: file_cfg.buffer_capacity,
        update_epochs: file_cfg.update_epochs,
        value_hidden: file_cfg.value_hidden,
        step_size: file_cfg.step_size,
        seed: file_cfg.seed,
    };
    let mut solver = deep_mpc::adaptive::integrator_task()?;
    let (vhat, curve) = train(
        &mut solver,
        &DVector::zeros(1),
        &DVector::zeros(1),
        &setup,
        sample_unit_sign,
        |x, u, _| DVector::from_element(1, x[0] + u[0]),
    )?;
    std::fs::create_dir_all(&file_cfg.out_dir).map_err(|e| Error::Io {
        path: file_cfg.out_dir.display().to_string(),
        source: e,
    })?;
    let curve_path = file_cfg.out_dir.join("learning_curve.csv");
    write_learning_curve(&curve, &curve_path)?;
    let vhat_path = file_cfg.out_dir.join("value_estimate.json");
    vhat.save_json(&vhat_path)?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": curve.len(),
            "first_episode_cost": curve.first().map(|r| r.total_cost),
            "last_episode_cost": curve.last().map(|r| r.total_cost),
            "learning_curve": curve_path.display().to_string(),
            "value_estimate": vhat_path.display().to_string(),
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            controller,
            out,
            seed,
            duration,
        } => cmd_run(scenario, controller, out, seed, duration),
        Command::Metrics { log } => cmd_metrics(log),
        Command::Train { config, episodes } => cmd_train(config, episodes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": error_kind(&e),
                    "message": e.to_string(),
                })
            );
            ExitCode::FAILURE
        }
    }
}
