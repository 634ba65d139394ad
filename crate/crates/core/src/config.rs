//! Experiment configuration: one TOML document with a section per
//! component. Every field has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{derive_seed, AgentConfig, LoopConfig, Mode};
use crate::dynamics::ModelConfig;
use crate::error::{Error, Result};
use crate::mpc::{PlanConfig, SafeActionSpace};
use crate::plant::{gen_ite_load, gen_weather, load_trace, EnvConfig, Environment, Trace, TraceKind, WeatherSpec};

/// Trace sources: files when given, otherwise synthetic generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub weather: Option<PathBuf>,
    pub load_west: Option<PathBuf>,
    pub load_east: Option<PathBuf>,
    /// Length of generated traces.
    pub days: usize,
    pub dt_minutes: f64,
    pub weather_spec: WeatherSpec,
    pub ite_peak_w: f64,
    pub ite_noise: f64,
    /// Seed of the synthetic traces, kept apart from the run seed so that
    /// runs with different seeds face the same conditions.
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            weather: None,
            load_west: None,
            load_east: None,
            days: 100,
            dt_minutes: 15.0,
            weather_spec: WeatherSpec::default(),
            ite_peak_w: 20000.0,
            ite_noise: 0.05,
            seed: 1,
        }
    }
}

impl TraceConfig {
    fn check_paths(&self) -> Result<()> {
        for p in [&self.weather, &self.load_west, &self.load_east].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("trace file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Weather and both load traces, with the weather spec overridden.
    pub fn build(&self, spec: &WeatherSpec) -> Result<(Trace, Trace, Trace)> {
        self.check_paths()?;
        let weather = match &self.weather {
            Some(p) => load_trace(p, TraceKind::Weather)?,
            None => gen_weather(self.days, spec, self.dt_minutes, derive_seed(self.seed, &[1]))?,
        };
        let load = |path: &Option<PathBuf>, tag: u64| match path {
            Some(p) => load_trace(p, TraceKind::IteLoad),
            None => gen_ite_load(
                self.days,
                self.ite_peak_w,
                self.ite_noise,
                self.dt_minutes,
                derive_seed(self.seed, &[tag]),
            ),
        };
        Ok((weather, load(&self.load_west, 2)?, load(&self.load_east, 3)?))
    }
}

/// Dynamics evaluation table settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub windows: Vec<usize>,
    pub horizon: usize,
    pub starts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            windows: vec![5, 10, 15, 20],
            horizon: 96,
            starts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub days: usize,
    /// `baseline-fixed` or `baseline-default`.
    pub controller: Mode,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            days: 1,
            controller: Mode::BaselineFixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plant: EnvConfig,
    pub traces: TraceConfig,
    pub model: ModelConfig,
    pub plan: PlanConfig,
    pub space: SafeActionSpace,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub eval: EvalConfig,
    pub simulate: SimulateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            plant: EnvConfig::default(),
            traces: TraceConfig::default(),
            model: ModelConfig::default(),
            plan: PlanConfig::default(),
            space: SafeActionSpace::default(),
            loop_cfg: LoopConfig::default(),
            eval: EvalConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.agent_config().validate()?;
        if self.eval.windows.is_empty() || self.eval.windows.contains(&0) || self.eval.horizon == 0 {
            return Err(Error::Config("eval needs non-empty positive windows and horizon".into()));
        }
        if self.simulate.days == 0 {
            return Err(Error::Config("simulate.days must be positive".into()));
        }
        if !matches!(self.simulate.controller, Mode::BaselineFixed | Mode::BaselineDefault) {
            return Err(Error::Config("simulate.controller must be a baseline".into()));
        }
        if self.traces.days == 0 {
            return Err(Error::Config("traces.days must be positive".into()));
        }
        self.traces.check_paths()
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            loop_cfg: self.loop_cfg,
            model: self.model,
            plan: self.plan,
            space: self.space,
            seed: self.seed,
        }
    }

    pub fn build_env(&self) -> Result<Environment> {
        self.build_env_with(&self.traces.weather_spec)
    }

    pub fn build_env_with(&self, spec: &WeatherSpec) -> Result<Environment> {
        let (w, a, b) = self.traces.build(spec)?;
        Environment::new(self.plant.clone(), w, a, b)
    }
}
