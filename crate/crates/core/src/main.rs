use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use hvac_mbrl::agent::{format_plans, read_daily_metrics, window_study, write_log, Agent, LoopConfig, Mode};
use hvac_mbrl::config::ExperimentConfig;
use hvac_mbrl::plant::WeatherSpec;
use hvac_mbrl::report::{Comparison, DeviationTable};
use hvac_mbrl::{Error, Result};

/// HVAC setpoint scheduling with learned dynamics and random-shooting MPC.
#[derive(Parser)]
#[command(name = "hvac-mbrl", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a baseline controller for a number of days and log it.
    Simulate {
        #[arg(long)]
        days: Option<usize>,
        /// baseline-fixed or baseline-default
        #[arg(long)]
        controller: Option<Mode>,
    },
    /// Deviation table over window lengths and weather presets.
    EvalDynamics {
        /// Comma-separated window lengths.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Collect data and run the control loop in the given mode.
    Run {
        /// mpc, imitation, baseline-fixed or baseline-default
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-day comparison of finished runs against the first (or --baseline).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        baseline: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    match cli.command {
        Command::Simulate { days, controller } => {
            if let Some(d) = days {
                cfg.simulate.days = d;
            }
            if let Some(c) = controller {
                cfg.simulate.controller = c;
            }
            cfg.validate()?;
            simulate(&cfg)
        }
        Command::EvalDynamics { windows, horizon } => {
            if let Some(w) = windows {
                cfg.eval.windows = w;
            }
            if let Some(h) = horizon {
                cfg.eval.horizon = h;
            }
            cfg.validate()?;
            eval_dynamics(&cfg)
        }
        Command::Run { mode, resume } => {
            if let Some(m) = mode {
                cfg.loop_cfg.mode = m;
            }
            cfg.validate()?;
            run_loop(&cfg, resume)
        }
        Command::Report { runs, baseline } => report(&cfg.out_dir, &runs, baseline),
    }
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<&Path> {
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dump = out.join("config.toml");
    std::fs::write(&dump, cfg.to_toml()).map_err(|e| Error::io(&dump, e))?;
    Ok(out)
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let days = cfg.simulate.days;
    let mut agent_cfg = cfg.agent_config();
    agent_cfg.loop_cfg = LoopConfig {
        initial_collect_steps: 0,
        steps_per_round: days * 96,
        total_rounds: 1,
        control_days: days,
        mode: cfg.simulate.controller,
        ..cfg.loop_cfg
    };
    let mut agent = Agent::new(agent_cfg, cfg.build_env()?)?;
    let report = agent.run(None)?;
    write_log(&out.join("episode.csv"), agent.log())?;
    report.write(out)?;
    println!(
        "{} days: mean TVR {:.4}, mean power {:.1} W",
        report.daily_tvr.len(),
        report.mean_tvr(),
        report.mean_power()
    );
    Ok(())
}

fn eval_dynamics(cfg: &ExperimentConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let conditions: Vec<(String, WeatherSpec)> = match &cfg.traces.weather {
        Some(p) => vec![(p.display().to_string(), cfg.traces.weather_spec)],
        None => WeatherSpec::presets().iter().map(|(n, s)| (n.to_string(), *s)).collect(),
    };
    let mut agent_cfg = cfg.agent_config();
    agent_cfg.loop_cfg.total_rounds = 0;
    agent_cfg.loop_cfg.mode = Mode::BaselineDefault;
    let mut table = DeviationTable {
        horizon: cfg.eval.horizon,
        windows: cfg.eval.windows.clone(),
        rows: Vec::new(),
    };
    for (name, spec) in conditions {
        info!("collecting exploratory data under {name} weather");
        let mut agent = Agent::new(agent_cfg.clone(), cfg.build_env_with(&spec)?)?;
        agent.collect_initial()?;
        let results = window_study(&cfg.model, agent.buffer(), &cfg.eval.windows, cfg.eval.horizon, cfg.eval.starts)?;
        table.rows.push((name, results.iter().map(|r| r.deviation.mean).collect()));
    }
    let path = out.join("deviation.csv");
    let text = table.to_csv();
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn run_loop(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let out = prepare_out(cfg)?;
    let env = cfg.build_env()?;
    let mut agent = if resume {
        Agent::resume(cfg.agent_config(), env, out)?
    } else {
        Agent::new(cfg.agent_config(), env)?
    };
    let report = agent.run(Some(out))?;
    write_log(&out.join("collect.csv"), agent.collection_log())?;
    write_log(&out.join("episode.csv"), agent.log())?;
    let plans = out.join("plans.csv");
    std::fs::write(&plans, format_plans(agent.plan_diagnostics())).map_err(|e| Error::io(&plans, e))?;
    report.write(out)?;
    println!(
        "{}: {} days, mean TVR {:.4}, mean power {:.1} W",
        report.mode.as_str(),
        report.daily_tvr.len(),
        report.mean_tvr(),
        report.mean_power()
    );
    Ok(())
}

fn report(out: &Path, runs: &[PathBuf], baseline: usize) -> Result<()> {
    let data = runs
        .iter()
        .map(|dir| {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string());
            Ok((name, read_daily_metrics(&dir.join("metrics.csv"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::new(data, baseline)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("comparison.csv");
    std::fs::write(&path, cmp.to_csv()).map_err(|e| Error::io(&path, e))?;
    print!("{}", cmp.summary());
    Ok(())
}
