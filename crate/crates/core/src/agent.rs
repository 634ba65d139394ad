//! Control loops: exploratory data collection, model-based rounds with the
//! planner or the cloned policy in the loop, baselines and daily metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dynamics::{evaluate_deviation, DeviationReport, DynamicsModel, ModelConfig, TrainReport};
use crate::error::{Error, Result};
use crate::experience::{compute_norm_stats, ExperienceBuffer, TrajectoryStep, DEFAULT_CAPACITY};
use crate::imitation::{ImitationBuffer, ImitationPair, Policy};
use crate::mpc::{
    decode_action, plan, History, NormalizedAction, PlanConfig, PlanDiagnostics, PlanResult, Predictor,
    RewardParams, SafeActionSpace,
};
use crate::plant::{EnvSnapshot, Environment, PlantState};
use crate::types::{Observation, RawAction, ACT_DIM};

pub const STEPS_PER_DAY: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Mpc,
    Imitation,
    BaselineFixed,
    BaselineDefault,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mpc => "mpc",
            Mode::Imitation => "imitation",
            Mode::BaselineFixed => "baseline-fixed",
            Mode::BaselineDefault => "baseline-default",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpc" => Ok(Mode::Mpc),
            "imitation" => Ok(Mode::Imitation),
            "baseline-fixed" => Ok(Mode::BaselineFixed),
            "baseline-default" => Ok(Mode::BaselineDefault),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected mpc, imitation, baseline-fixed or baseline-default)"
            ))),
        }
    }
}

/// Which dynamics the planner queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Learned,
    /// The simulator itself, restored to the current state for every
    /// candidate.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub initial_collect_steps: usize,
    pub steps_per_round: usize,
    pub total_rounds: usize,
    /// Cap on control-phase days; the last round is shortened to fit.
    pub control_days: usize,
    pub mode: Mode,
    pub predictor: PredictorKind,
    pub buffer_capacity: usize,
    pub imitation_capacity: usize,
    /// Action held by the fixed baseline and around which exploration
    /// reverts.
    pub fixed_action: RawAction,
    /// Half-width of the uniform exploration increments in z-space.
    pub explore_half_range: f64,
    /// Fraction of the gap to the fixed action closed per exploration step.
    pub explore_reversion: f64,
    /// Open-loop horizon of the per-round deviation check.
    pub eval_horizon: usize,
    pub eval_starts: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            initial_collect_steps: 6240,
            steps_per_round: 672,
            total_rounds: 5,
            control_days: 30,
            mode: Mode::Mpc,
            predictor: PredictorKind::Learned,
            buffer_capacity: DEFAULT_CAPACITY,
            imitation_capacity: DEFAULT_CAPACITY,
            fixed_action: RawAction::new(23.5, 23.5, 6.25, 6.25),
            explore_half_range: 1.0,
            explore_reversion: 0.05,
            eval_horizon: STEPS_PER_DAY,
            eval_starts: 20,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps_per_round > 0
            && self.buffer_capacity > 0
            && self.imitation_capacity > 0
            && (0.0..=1.0).contains(&self.explore_half_range)
            && (0.0..=1.0).contains(&self.explore_reversion)
            && self.eval_horizon > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid loop configuration {self:?}")))
        }
    }

    /// Control steps executed in round `round` (0-based).
    pub fn round_steps(&self, round: usize) -> usize {
        let cap = self.control_days * STEPS_PER_DAY;
        let done = round * self.steps_per_round;
        if round >= self.total_rounds || done >= cap {
            0
        } else {
            self.steps_per_round.min(cap - done)
        }
    }

    pub fn control_steps(&self) -> usize {
        (0..self.total_rounds).map(|r| self.round_steps(r)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub loop_cfg: LoopConfig,
    pub model: ModelConfig,
    pub plan: PlanConfig,
    pub space: SafeActionSpace,
    pub seed: u64,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loop_cfg.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.space.validate()?;
        self.space.check_bounds(&self.loop_cfg.fixed_action)
    }
}

/// Deterministic per-purpose seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, p| mix(acc ^ mix(*p)))
}

const TAG_EXPLORE: u64 = 1;
const TAG_PLAN: u64 = 2;
const TAG_MODEL: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_POLICY: u64 = 5;
const TAG_POLICY_TRAIN: u64 = 6;

/// One executed control step: the action, the resulting observation and
/// its reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub obs: Observation,
    pub action: RawAction,
    pub reward: f64,
    pub violations: [bool; 2],
}

pub const LOG_HEADER: &str =
    "step,T_out,T_west,T_east,P_ite,P_hvac,TS_west,TS_east,F_west,F_east,reward,violation_west,violation_east";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 160);
    s.push_str(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let o = r.obs;
        let a = r.action;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            o.t_out,
            o.t_west,
            o.t_east,
            o.p_ite,
            o.p_hvac,
            a.ts_west,
            a.ts_east,
            a.f_west,
            a.f_east,
            r.reward,
            r.violations[0] as u8,
            r.violations[1] as u8
        );
    }
    s
}

pub const PLAN_HEADER: &str =
    "step,best_reward,worst_reward,mean_reward,feasible,selected,selected_violations,wall_seconds";

pub fn format_plans(plans: &[(u64, PlanDiagnostics)]) -> String {
    let mut s = String::from(PLAN_HEADER);
    s.push('\n');
    for (step, d) in plans {
        let _ = writeln!(
            s,
            "{step},{},{},{},{},{},{},{}",
            d.best_reward, d.worst_reward, d.mean_reward, d.feasible, d.selected, d.selected_violations, d.wall_seconds
        );
    }
    s
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, format_log(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, path)
}

pub fn parse_log(text: &str, path: &Path) -> Result<Vec<LogRow>> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => return Err(parse_err(1, "missing episode log header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(parse_err(i + 1, format!("expected 13 fields, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].trim()
                .parse::<f64>()
                .map_err(|_| parse_err(i + 1, format!("malformed number {:?}", f[k])))
        };
        let flag = |k: usize| -> Result<bool> {
            match f[k].trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(i + 1, format!("malformed flag {other:?}"))),
            }
        };
        let step = f[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| parse_err(i + 1, format!("malformed step {:?}", f[0])))?;
        rows.push(LogRow {
            step,
            obs: Observation::from_array([num(1)?, num(2)?, num(3)?, num(4)?, num(5)?]),
            action: RawAction::new(num(6)?, num(7)?, num(8)?, num(9)?),
            reward: num(10)?,
            violations: [flag(11)?, flag(12)?],
        });
    }
    Ok(rows)
}

fn whole_days(rows: &[LogRow], what: &str) -> usize {
    let days = rows.len() / STEPS_PER_DAY;
    if !rows.len().is_multiple_of(STEPS_PER_DAY) {
        warn!(
            "{what}: ignoring a partial day of {} steps",
            rows.len() % STEPS_PER_DAY
        );
    }
    days
}

/// Per whole day, the fraction of steps with either zone outside the band.
pub fn daily_tvr(rows: &[LogRow], params: &RewardParams) -> Vec<f64> {
    let days = whole_days(rows, "daily violation rate");
    (0..days)
        .map(|d| {
            let day = &rows[d * STEPS_PER_DAY..(d + 1) * STEPS_PER_DAY];
            let bad = day
                .iter()
                .filter(|r| params.violates(r.obs.t_west) || params.violates(r.obs.t_east))
                .count();
            bad as f64 / STEPS_PER_DAY as f64
        })
        .collect()
}

/// Per whole day, the mean of `P_ite + P_hvac`.
pub fn daily_avg_power(rows: &[LogRow]) -> Vec<f64> {
    let days = whole_days(rows, "daily average power");
    (0..days)
        .map(|d| {
            let day = &rows[d * STEPS_PER_DAY..(d + 1) * STEPS_PER_DAY];
            day.iter().map(|r| r.obs.total_power()).sum::<f64>() / STEPS_PER_DAY as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub daily_tvr: Vec<f64>,
    pub daily_avg_power: Vec<f64>,
    /// Open-loop deviation of the model after each round's training.
    pub round_deviation: Vec<f64>,
    pub round_val_loss: Vec<f64>,
    /// Mean squared distance between executed policy actions and planner
    /// labels, per round (imitation mode).
    pub label_mse: Vec<f64>,
    pub cumulative_reward: f64,
    pub control_steps: usize,
    /// Every environment step taken, including warm-up and collection.
    pub env_steps: usize,
}

impl MetricsReport {
    pub fn from_log(mode: Mode, rows: &[LogRow], params: &RewardParams) -> Self {
        Self {
            mode,
            daily_tvr: daily_tvr(rows, params),
            daily_avg_power: daily_avg_power(rows),
            round_deviation: Vec::new(),
            round_val_loss: Vec::new(),
            label_mse: Vec::new(),
            cumulative_reward: rows.iter().map(|r| r.reward).sum(),
            control_steps: rows.len(),
            env_steps: 0,
        }
    }

    pub fn mean_tvr(&self) -> f64 {
        mean(&self.daily_tvr)
    }

    pub fn mean_power(&self) -> f64 {
        mean(&self.daily_avg_power)
    }

    /// Per-day rows `day,tvr,avg_power_w`.
    pub fn daily_csv(&self) -> String {
        let mut s = String::from("day,tvr,avg_power_w\n");
        for (d, (t, p)) in self.daily_tvr.iter().zip(&self.daily_avg_power).enumerate() {
            let _ = writeln!(s, "{},{},{}", d + 1, t, p);
        }
        s
    }

    pub fn summary_toml(&self) -> String {
        let mut s = toml::to_string(self).expect("report serializes");
        let _ = writeln!(s, "\n[summary]\nmean_tvr = {:?}\nmean_power_w = {:?}", self.mean_tvr(), self.mean_power());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let daily = dir.join("metrics.csv");
        std::fs::write(&daily, self.daily_csv()).map_err(|e| Error::io(&daily, e))?;
        let summary = dir.join("summary.toml");
        std::fs::write(&summary, self.summary_toml()).map_err(|e| Error::io(&summary, e))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Parse a `metrics.csv` written by [`MetricsReport::write`].
pub fn read_daily_metrics(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected day,tvr,avg_power_w".into(),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        let t = f[1].parse::<f64>().map_err(|_| bad())?;
        let p = f[2].parse::<f64>().map_err(|_| bad())?;
        out.push((t, p));
    }
    Ok(out)
}

/// Planner dynamics backed by the simulator.
pub struct OraclePredictor {
    env: std::cell::RefCell<Environment>,
    start: EnvSnapshot,
    window: usize,
}

impl OraclePredictor {
    pub fn new(env: &Environment, window: usize) -> Self {
        Self {
            start: env.snapshot(),
            env: std::cell::RefCell::new(env.clone()),
            window,
        }
    }
}

impl Predictor for OraclePredictor {
    fn window(&self) -> usize {
        self.window
    }

    fn rollout(
        &self,
        _hist: &History,
        actions: &[RawAction],
        batch: usize,
        horizon: usize,
    ) -> Result<Vec<Observation>> {
        let mut env = self.env.borrow_mut();
        let mut out = Vec::with_capacity(batch * horizon);
        for c in 0..batch {
            env.restore(&self.start);
            let mut last = None;
            for a in &actions[c * horizon..(c + 1) * horizon] {
                // past the trace end the last observation is held
                if let Some(o) = env.step(a)? {
                    last = Some(o.observation);
                }
                out.push(last.ok_or(Error::InsufficientData("oracle rollout past the trace end".into()))?);
            }
        }
        Ok(out)
    }
}

/// Mutable progress of a run; everything needed to resume it.
#[derive(Debug, Clone, PartialEq)]
struct Progress {
    obs: Observation,
    a_prev: RawAction,
    next_step: u64,
    rounds_done: usize,
    env_steps: usize,
    collected: bool,
    round_deviation: Vec<f64>,
    round_val_loss: Vec<f64>,
    label_mse: Vec<f64>,
    plans: Vec<(u64, PlanDiagnostics)>,
}

/// Control loop over one environment.
pub struct Agent {
    cfg: AgentConfig,
    env: Environment,
    buffer: ExperienceBuffer,
    pairs: ImitationBuffer,
    model: Option<DynamicsModel>,
    policy: Option<Policy>,
    collect_log: Vec<LogRow>,
    log: Vec<LogRow>,
    progress: Progress,
}

impl Agent {
    /// Take an unrecorded warm-up step with the fixed action to obtain the
    /// first observation.
    pub fn new(cfg: AgentConfig, mut env: Environment) -> Result<Self> {
        cfg.validate()?;
        let fixed = cfg.loop_cfg.fixed_action;
        let needed = 1 + cfg.loop_cfg.initial_collect_steps + cfg.loop_cfg.control_steps();
        if env.remaining_steps() < needed {
            return Err(Error::InsufficientData(format!(
                "traces cover {} control steps, the run needs {needed}",
                env.remaining_steps()
            )));
        }
        let first = env
            .step(&fixed)?
            .ok_or_else(|| Error::InsufficientData("traces end before the warm-up step".into()))?;
        Ok(Self {
            buffer: ExperienceBuffer::new(cfg.loop_cfg.buffer_capacity),
            pairs: ImitationBuffer::new(cfg.loop_cfg.imitation_capacity),
            model: None,
            policy: None,
            collect_log: Vec::new(),
            log: Vec::new(),
            progress: Progress {
                obs: first.observation,
                a_prev: fixed,
                next_step: 0,
                rounds_done: 0,
                env_steps: 1,
                collected: false,
                round_deviation: Vec::new(),
                round_val_loss: Vec::new(),
                label_mse: Vec::new(),
                plans: Vec::new(),
            },
            cfg,
            env,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &ExperienceBuffer {
        &self.buffer
    }

    pub fn imitation_buffer(&self) -> &ImitationBuffer {
        &self.pairs
    }

    pub fn model(&self) -> Option<&DynamicsModel> {
        self.model.as_ref()
    }

    pub fn policy(&self) -> Option<&Policy> {
        self.policy.as_ref()
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    /// Control-phase episode log.
    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn collection_log(&self) -> &[LogRow] {
        &self.collect_log
    }

    /// Diagnostics of every planner call, keyed by trajectory step.
    pub fn plan_diagnostics(&self) -> &[(u64, PlanDiagnostics)] {
        &self.progress.plans
    }

    pub fn rounds_done(&self) -> usize {
        self.progress.rounds_done
    }

    fn params(&self) -> RewardParams {
        self.env.config().reward
    }

    /// Execute `action`, record the transition and advance.
    fn execute(&mut self, action: RawAction, control: bool) -> Result<()> {
        let space = &self.cfg.space;
        space.check_bounds(&action)?;
        if !space.within_rate(&self.progress.a_prev, &action) {
            return Err(Error::InvalidParameter(format!(
                "action {action:?} exceeds the rate limit from {:?}",
                self.progress.a_prev
            )));
        }
        let out = self
            .env
            .step(&action)?
            .ok_or_else(|| Error::InsufficientData("traces exhausted during the run".into()))?;
        self.progress.env_steps += 1;
        let step = self.progress.next_step;
        self.buffer.append(TrajectoryStep {
            o: self.progress.obs,
            a: action,
            episode_id: 0,
            step_index: step,
        });
        let row = LogRow {
            step,
            obs: out.observation,
            action,
            reward: out.reward.total,
            violations: out.reward.violations,
        };
        if control {
            self.log.push(row);
        } else {
            self.collect_log.push(row);
        }
        self.progress.obs = out.observation;
        self.progress.a_prev = action;
        self.progress.next_step += 1;
        Ok(())
    }

    fn explore_action(&self) -> RawAction {
        let lc = &self.cfg.loop_cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_EXPLORE, self.progress.next_step]));
        let (prev, fixed, d) = (
            self.progress.a_prev.to_array(),
            lc.fixed_action.to_array(),
            self.cfg.space.delta.to_array(),
        );
        let z: [f64; ACT_DIM] = std::array::from_fn(|i| {
            let u = if lc.explore_half_range > 0.0 {
                rng.gen_range(-lc.explore_half_range..=lc.explore_half_range)
            } else {
                0.0
            };
            u + lc.explore_reversion * (fixed[i] - prev[i]) / d[i]
        });
        decode_action(&NormalizedAction::clamped(z), &self.progress.a_prev, &self.cfg.space)
            .expect("previous action is within bounds")
    }

    /// Run the default exploratory controller (or the fixed action for the
    /// fixed baseline) for the configured number of collection steps.
    pub fn collect_initial(&mut self) -> Result<()> {
        if self.progress.collected {
            return Ok(());
        }
        let fixed_only = self.cfg.loop_cfg.mode == Mode::BaselineFixed;
        for _ in 0..self.cfg.loop_cfg.initial_collect_steps {
            let a = match fixed_only {
                true => self.cfg.loop_cfg.fixed_action,
                false => self.explore_action(),
            };
            self.execute(a, false)?;
        }
        self.progress.collected = true;
        info!("collected {} exploratory steps", self.buffer.len());
        Ok(())
    }

    /// History ending at the current observation.
    fn history(&self, w: usize) -> Result<History> {
        let n = self.buffer.len();
        if n + 1 < w {
            return Err(Error::InsufficientData(format!("need {} past steps for the window", w - 1)));
        }
        let past: Vec<&TrajectoryStep> = (n + 1 - w..n).map(|i| self.buffer.get(i).expect("in range")).collect();
        let mut obs: Vec<Observation> = past.iter().map(|s| s.o).collect();
        obs.push(self.progress.obs);
        History::new(obs, past.iter().map(|s| s.a).collect())
    }

    /// Policy input ending at the current observation: observations
    /// `o(t-W+1..t)` and the actions `a(t-W..t-1)` preceding each.
    fn policy_window(&self, w: usize) -> Result<(Vec<Observation>, Vec<RawAction>)> {
        let n = self.buffer.len();
        if n < w {
            return Err(Error::InsufficientData(format!("need {w} past steps for the policy window")));
        }
        let past: Vec<&TrajectoryStep> = (n - w..n).map(|i| self.buffer.get(i).expect("in range")).collect();
        let mut obs: Vec<Observation> = past[1..].iter().map(|s| s.o).collect();
        obs.push(self.progress.obs);
        Ok((obs, past.iter().map(|s| s.a).collect()))
    }

    fn plan_here(&self, model: &dyn Predictor) -> Result<PlanResult> {
        let hist = self.history(model.window())?;
        let cfg = PlanConfig {
            seed: derive_seed(self.cfg.seed, &[TAG_PLAN, self.progress.next_step]),
            ..self.cfg.plan
        };
        plan(model, &hist, &self.progress.a_prev, &cfg, &self.params(), &self.cfg.space)
    }

    fn train_round(&mut self, round: usize) -> Result<()> {
        let mut cfg = self.cfg.model;
        let stats = compute_norm_stats(&self.buffer)?;
        let mut model = match self.model.take() {
            Some(m) => m,
            None => {
                cfg.seed = derive_seed(self.cfg.seed, &[TAG_MODEL]);
                DynamicsModel::new(cfg, stats.clone())?
            }
        };
        let mut train_cfg = *model.config();
        train_cfg.seed = derive_seed(self.cfg.seed, &[TAG_TRAIN, round as u64]);
        let mut trainee = DynamicsModel::new(train_cfg, stats)?;
        trainee.params_mut().copy_from_slice(model.params());
        let report = trainee.train(&self.buffer)?;
        model.params_mut().copy_from_slice(trainee.params());
        model.set_stats(trainee.stats().clone());
        info!(
            "round {round}: train loss {:.5} -> {:.5}, validation {:?}",
            report.initial_loss, report.final_train_loss, report.val_loss
        );
        self.progress.round_val_loss.push(report.val_loss.unwrap_or(f64::NAN));
        let dev = self.round_deviation(&model)?;
        self.progress.round_deviation.push(dev);
        self.model = Some(model);
        Ok(())
    }

    /// Deviation over evenly spaced starts inside the validation tail of the
    /// buffer.
    fn round_deviation(&self, model: &DynamicsModel) -> Result<f64> {
        let lc = &self.cfg.loop_cfg;
        let steps: Vec<TrajectoryStep> = self.buffer.iter().copied().collect();
        let w = model.config().window;
        let n = steps.len();
        let tail = ((1.0 - model.config().train_ratio) * n as f64) as usize;
        let h = lc.eval_horizon.min(tail.saturating_sub(1)).max(1);
        let lo = (n - tail).max(w - 1);
        if lo + h >= n {
            return Ok(f64::NAN);
        }
        let span = n - h - lo;
        let k = lc.eval_starts.max(1).min(span);
        let starts: Vec<usize> = (0..k).map(|i| lo + i * span / k).collect();
        match evaluate_deviation(model, &steps, &starts, h) {
            Ok(r) => Ok(r.mean),
            Err(Error::InsufficientData(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    }

    fn train_policy(&mut self, round: usize) -> Result<()> {
        let model = self.model.as_ref().expect("dynamics trained first");
        let stats = model.stats().clone();
        let mut policy = match self.policy.take() {
            Some(p) => p,
            None => {
                let cfg = ModelConfig {
                    seed: derive_seed(self.cfg.seed, &[TAG_POLICY]),
                    ..self.cfg.model
                };
                Policy::new(cfg, stats.clone())?
            }
        };
        policy.set_stats(stats);
        if !self.pairs.is_empty() {
            let cfg = ModelConfig {
                seed: derive_seed(self.cfg.seed, &[TAG_POLICY_TRAIN, round as u64]),
                ..*policy.config()
            };
            let mut trainee = Policy::new(cfg, policy.stats().clone())?;
            trainee.params_mut().copy_from_slice(policy.params());
            let losses = trainee.train(&self.pairs)?;
            policy.params_mut().copy_from_slice(trainee.params());
            info!("round {round}: imitation loss {:?}", losses.last());
        }
        self.policy = Some(policy);
        Ok(())
    }

    fn run_round(&mut self, round: usize) -> Result<()> {
        let steps = self.cfg.loop_cfg.round_steps(round);
        let mode = self.cfg.loop_cfg.mode;
        let learned = self.cfg.loop_cfg.predictor == PredictorKind::Learned;
        if matches!(mode, Mode::Mpc | Mode::Imitation) && learned {
            self.train_round(round)?;
        }
        if mode == Mode::Imitation {
            self.train_policy(round)?;
        }
        let mut label_err = 0.0;
        for _ in 0..steps {
            let action = match mode {
                Mode::BaselineFixed => self.cfg.loop_cfg.fixed_action,
                Mode::BaselineDefault => self.explore_action(),
                Mode::Mpc => {
                    let r = self.mpc_decision()?;
                    self.progress.plans.push((self.progress.next_step, r.diagnostics));
                    r.action
                }
                Mode::Imitation => {
                    let policy = self.policy.as_ref().expect("policy initialized");
                    let (obs, prev) = self.policy_window(policy.config().window)?;
                    let z = policy.forward(&obs, &prev)?;
                    // offline label from the planner for the same state
                    let r = self.mpc_decision()?;
                    self.progress.plans.push((self.progress.next_step, r.diagnostics));
                    let label = r.z;
                    label_err += z.0.iter().zip(label.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    self.pairs.aggregate(ImitationPair {
                        obs_window: obs,
                        prev_actions: prev,
                        label,
                    });
                    decode_action(&z, &self.progress.a_prev, &self.cfg.space)?
                }
            };
            self.execute(action, true)?;
        }
        if mode == Mode::Imitation && steps > 0 {
            self.progress.label_mse.push(label_err / steps as f64);
        }
        self.progress.rounds_done = round + 1;
        Ok(())
    }

    fn mpc_decision(&self) -> Result<PlanResult> {
        match self.cfg.loop_cfg.predictor {
            PredictorKind::Learned => {
                let model = self.model.as_ref().expect("model trained before planning");
                self.plan_here(model)
            }
            PredictorKind::Oracle => {
                let w = self.cfg.model.window.min(self.buffer.len() + 1).max(1);
                self.plan_here(&OraclePredictor::new(&self.env, w))
            }
        }
    }

    /// Collect (if not yet done) and run every remaining round, writing a
    /// checkpoint into `checkpoint` after each.
    pub fn run(&mut self, checkpoint: Option<&Path>) -> Result<MetricsReport> {
        if !self.progress.collected {
            self.collect_initial()?;
            if let Some(dir) = checkpoint {
                self.save_checkpoint(dir)?;
            }
        }
        while self.progress.rounds_done < self.cfg.loop_cfg.total_rounds
            && self.cfg.loop_cfg.round_steps(self.progress.rounds_done) > 0
        {
            let round = self.progress.rounds_done;
            self.run_round(round)?;
            info!("round {round} done, {} control steps so far", self.log.len());
            if let Some(dir) = checkpoint {
                self.save_checkpoint(dir)?;
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::from_log(self.cfg.loop_cfg.mode, &self.log, &self.params());
        r.round_deviation = self.progress.round_deviation.clone();
        r.round_val_loss = self.progress.round_val_loss.clone();
        r.label_mse = self.progress.label_mse.clone();
        r.env_steps = self.progress.env_steps;
        r
    }

    /// Write the full run state into `dir`, replacing any previous
    /// checkpoint atomically.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("checkpoint.tmp");
        let fin = dir.join("checkpoint");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.buffer.save(&tmp.join("buffer.bin"))?;
        self.pairs.save(&tmp.join("pairs.bin"))?;
        if let Some(m) = &self.model {
            m.save(&tmp.join("model.bin"))?;
        }
        if let Some(p) = &self.policy {
            p.save(&tmp.join("policy.bin"))?;
        }
        write_log(&tmp.join("collect.csv"), &self.collect_log)?;
        write_log(&tmp.join("episode.csv"), &self.log)?;
        self.encode_state().save(&tmp.join("state.bin"))?;
        if fin.exists() {
            std::fs::remove_dir_all(&fin).map_err(|e| Error::io(&fin, e))?;
        }
        std::fs::rename(&tmp, &fin).map_err(|e| Error::io(&fin, e))
    }

    fn encode_state(&self) -> Writer {
        let mut w = Writer::new(STATE_MAGIC, STATE_VERSION);
        w.str(&toml::to_string(&self.cfg).expect("config serializes"));
        let p = &self.progress;
        for v in p.obs.to_array().into_iter().chain(p.a_prev.to_array()) {
            w.f64(v);
        }
        w.u64(p.next_step)
            .u64(p.rounds_done as u64)
            .u64(p.env_steps as u64)
            .u64(p.collected as u64);
        w.f64s(&p.round_deviation).f64s(&p.round_val_loss).f64s(&p.label_mse);
        w.u64(p.plans.len() as u64);
        for (step, d) in &p.plans {
            w.u64(*step)
                .f64(d.best_reward)
                .f64(d.worst_reward)
                .f64(d.mean_reward)
                .u64(d.feasible as u64)
                .u64(d.selected as u64)
                .u64(d.selected_violations as u64)
                .f64(d.wall_seconds);
        }
        let snap = self.env.snapshot();
        for z in &snap.zones {
            w.f64(z.t_supply).f64(z.t_space).f64(z.w_space);
        }
        w.f64(snap.minute).u64(snap.step);
        w
    }

    /// Rebuild an agent from a checkpoint written by a run with the same
    /// configuration over the same environment.
    pub fn resume(cfg: AgentConfig, mut env: Environment, dir: &Path) -> Result<Self> {
        let ck = dir.join("checkpoint");
        let mut r = Reader::open(&ck.join("state.bin"), STATE_MAGIC, STATE_VERSION, "run state")?;
        let stored = r.str()?;
        let current = toml::to_string(&cfg).expect("config serializes");
        if stored != current {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different configuration; refusing to resume".into(),
            ));
        }
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = r.f64()?;
        }
        let mut progress = Progress {
            obs: Observation::from_slice(&v[..5]),
            a_prev: RawAction::from_slice(&v[5..]),
            next_step: r.u64()?,
            rounds_done: r.usize()?,
            env_steps: r.usize()?,
            collected: r.u64()? != 0,
            round_deviation: Vec::new(),
            round_val_loss: Vec::new(),
            label_mse: Vec::new(),
            plans: Vec::new(),
        };
        progress.round_deviation = r.f64s()?;
        progress.round_val_loss = r.f64s()?;
        progress.label_mse = r.f64s()?;
        for _ in 0..r.usize()? {
            let step = r.u64()?;
            let d = PlanDiagnostics {
                best_reward: r.f64()?,
                worst_reward: r.f64()?,
                mean_reward: r.f64()?,
                feasible: r.usize()?,
                selected: r.usize()?,
                selected_violations: r.u64()? as u32,
                wall_seconds: r.f64()?,
            };
            progress.plans.push((step, d));
        }
        let mut zones = [PlantState {
            t_supply: 0.0,
            t_space: 0.0,
            w_space: 0.0,
        }; 2];
        for z in &mut zones {
            z.t_supply = r.f64()?;
            z.t_space = r.f64()?;
            z.w_space = r.f64()?;
        }
        let minute = r.f64()?;
        let step = r.u64()?;
        r.finish()?;
        env.restore(&EnvSnapshot { zones, minute, step });
        let opt = |name: &str| -> Option<PathBuf> {
            let p = ck.join(name);
            p.exists().then_some(p)
        };
        Ok(Self {
            buffer: ExperienceBuffer::load(&ck.join("buffer.bin"))?,
            pairs: ImitationBuffer::load(&ck.join("pairs.bin"))?,
            model: opt("model.bin").map(|p| DynamicsModel::load(&p)).transpose()?,
            policy: opt("policy.bin").map(|p| Policy::load(&p)).transpose()?,
            collect_log: read_log(&ck.join("collect.csv"))?,
            log: read_log(&ck.join("episode.csv"))?,
            progress,
            cfg,
            env,
        })
    }
}

/// Deviation of one trained window length.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub window: usize,
    pub deviation: DeviationReport,
    pub train: TrainReport,
    pub model: DynamicsModel,
}

/// `k` evenly spaced start indices inside the last `1 - train_ratio` of
/// `n` steps, leaving `horizon` steps after each and `max_window - 1` before.
pub fn holdout_starts(n: usize, train_ratio: f64, max_window: usize, horizon: usize, k: usize) -> Result<Vec<usize>> {
    let lo = ((train_ratio * n as f64).ceil() as usize).max(max_window.saturating_sub(1));
    if k == 0 || lo + horizon >= n {
        return Err(Error::InsufficientData(format!(
            "{n} steps leave no held-out start for horizon {horizon}"
        )));
    }
    let span = n - horizon - lo;
    let k = k.min(span);
    Ok((0..k).map(|i| lo + i * span / k).collect())
}

/// Train one model per window length on the same buffer and measure each
/// on the same held-out start points.
pub fn window_study(
    base: &ModelConfig,
    buffer: &ExperienceBuffer,
    windows: &[usize],
    horizon: usize,
    starts: usize,
) -> Result<Vec<WindowResult>> {
    let steps: Vec<TrajectoryStep> = buffer.iter().copied().collect();
    let max_w = windows.iter().copied().max().unwrap_or(1);
    let idx = holdout_starts(steps.len(), base.train_ratio, max_w, horizon, starts)?;
    let stats = compute_norm_stats(buffer)?;
    windows
        .iter()
        .map(|&w| {
            let cfg = ModelConfig { window: w, ..*base };
            let mut model = DynamicsModel::new(cfg, stats.clone())?;
            let train = model.train(buffer)?;
            let deviation = evaluate_deviation(&model, &steps, &idx, horizon)?;
            info!("W={w}: deviation {:.4}", deviation.mean);
            Ok(WindowResult {
                window: w,
                deviation,
                train,
                model,
            })
        })
        .collect()
}

const STATE_MAGIC: &[u8; 4] = b"HVXS";
const STATE_VERSION: u32 = 1;

/// Every executed action is inside the box and within the rate limit of
/// its predecessor. Returns the index of the first offending row.
pub fn audit_actions(rows: &[LogRow], start: Option<RawAction>, space: &SafeActionSpace) -> std::result::Result<(), usize> {
    let mut prev = start;
    for (i, r) in rows.iter().enumerate() {
        if !space.contains(&r.action) {
            return Err(i);
        }
        if let Some(p) = prev {
            if !space.within_rate(&p, &r.action) {
                return Err(i);
            }
        }
        prev = Some(r.action);
    }
    Ok(())
}
