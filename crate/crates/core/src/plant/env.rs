use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    hvac_power, step_single_zone, ControlInput, Exogenous, Integrator, PlantParams, PlantState,
    Trace, TraceKind, BTU_PER_MIN_PER_WATT,
};
use crate::error::{Error, Result};
use crate::mpc::{reward, RewardBreakdown, RewardParams};
use crate::types::{Observation, RawAction};

/// Per-zone equipment loop closing the setpoint: chilled water proportional
/// to the temperature error, fan flow affine in the flow command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalLoop {
    /// Air flow per unit of the fan command, ft³/min.
    pub flow_per_unit: f64,
    /// Air flow offset, ft³/min.
    pub flow_offset: f64,
    /// Chilled-water gain, gal/min per °C above setpoint.
    pub chill_gain: f64,
    /// Chilled-water valve limit, gal/min.
    pub gpm_max: f64,
}

impl Default for LocalLoop {
    fn default() -> Self {
        Self {
            flow_per_unit: 400.0,
            flow_offset: 0.0,
            chill_gain: 0.036,
            gpm_max: 0.2,
        }
    }
}

impl LocalLoop {
    pub fn control(&self, state: &PlantState, setpoint_c: f64, flow_cmd: f64) -> ControlInput {
        let gpm = (self.chill_gain * (state.t_space - setpoint_c)).clamp(0.0, self.gpm_max);
        ControlInput {
            flow: (self.flow_offset + self.flow_per_unit * flow_cmd).max(0.0),
            gpm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub plant: PlantParams,
    pub local_loop: LocalLoop,
    pub control_minutes: f64,
    pub substep_minutes: f64,
    pub integrator: Integrator,
    /// Moisture load per zone, lb/min.
    pub moisture_load: f64,
    pub initial_temp_c: f64,
    /// Standard deviation of additive zone-temperature sensor noise, °C.
    pub sensor_noise_c: f64,
    pub noise_seed: u64,
    pub reward: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            plant: PlantParams::default(),
            local_loop: LocalLoop::default(),
            control_minutes: 15.0,
            substep_minutes: 1.0,
            integrator: Integrator::Euler,
            moisture_load: 0.0,
            initial_temp_c: 23.5,
            sensor_noise_c: 0.0,
            noise_seed: 0,
            reward: RewardParams::default(),
        }
    }
}

/// Result of one control interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
}

/// Serializable mutable state of an [`Environment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub zones: [PlantState; 2],
    pub minute: f64,
    pub step: u64,
}

/// Two independent zones sharing weather, each with its own IT load.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    weather: Trace,
    loads: [Trace; 2],
    zones: [PlantState; 2],
    minute: f64,
    step: u64,
}

impl Environment {
    pub fn new(cfg: EnvConfig, weather: Trace, load_west: Trace, load_east: Trace) -> Result<Self> {
        cfg.plant.validate()?;
        if weather.kind() != TraceKind::Weather {
            return Err(Error::InvalidParameter("weather trace has the wrong kind".into()));
        }
        if load_west.kind() != TraceKind::IteLoad || load_east.kind() != TraceKind::IteLoad {
            return Err(Error::InvalidParameter("load trace has the wrong kind".into()));
        }
        if !(cfg.substep_minutes > 0.0 && cfg.control_minutes >= cfg.substep_minutes) {
            return Err(Error::InvalidParameter(
                "need 0 < substep_minutes <= control_minutes".into(),
            ));
        }
        let substeps = cfg.control_minutes / cfg.substep_minutes;
        if (substeps - substeps.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "control interval must be a whole number of sub-steps".into(),
            ));
        }
        let t0 = cfg.initial_temp_c;
        let zone = PlantState {
            t_supply: t0 - 5.0,
            t_space: t0,
            w_space: cfg.plant.w_supply,
        };
        let minute = weather
            .start_minute()
            .max(load_west.start_minute())
            .max(load_east.start_minute());
        Ok(Self {
            cfg,
            weather,
            loads: [load_west, load_east],
            zones: [zone, zone],
            minute,
            step: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn zones(&self) -> &[PlantState; 2] {
        &self.zones
    }

    pub fn minute(&self) -> f64 {
        self.minute
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            zones: self.zones,
            minute: self.minute,
            step: self.step,
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) {
        self.zones = snap.zones;
        self.minute = snap.minute;
        self.step = snap.step;
    }

    fn end_minute(&self) -> f64 {
        self.weather
            .end_minute()
            .min(self.loads[0].end_minute())
            .min(self.loads[1].end_minute())
    }

    /// Whole control intervals left before a trace runs out.
    pub fn remaining_steps(&self) -> usize {
        let left = (self.end_minute() - self.minute) / self.cfg.control_minutes;
        if left <= 0.0 {
            0
        } else {
            (left + 1e-9).floor() as usize
        }
    }

    /// Advance one control interval holding `action`. Returns `None` once the
    /// traces cannot cover a full interval.
    pub fn step(&mut self, action: &RawAction) -> Result<Option<StepOutcome>> {
        if self.remaining_steps() == 0 {
            return Ok(None);
        }
        let dt = self.cfg.substep_minutes;
        let n = (self.cfg.control_minutes / dt).round() as usize;
        let setpoints = [action.ts_west, action.ts_east];
        let flows = [action.f_west, action.f_east];
        let mut acc = [0.0f64; 5];
        let mut zones = self.zones;
        for k in 0..n {
            let minute = self.minute + dt * k as f64;
            let w = self.weather.at(minute)?;
            let (t_out, w_out) = (w[0], w[1]);
            let mut p_ite = 0.0;
            let mut p_hvac = 0.0;
            for z in 0..2 {
                let watts = self.loads[z].at(minute)?[0];
                let exo = Exogenous {
                    t_out,
                    w_out,
                    q_load: watts * BTU_PER_MIN_PER_WATT,
                    m_load: self.cfg.moisture_load,
                };
                let input = self.cfg.local_loop.control(&zones[z], setpoints[z], flows[z]);
                p_hvac += hvac_power(&input, &self.cfg.plant);
                p_ite += watts;
                zones[z] = step_single_zone(
                    &zones[z],
                    &input,
                    &exo,
                    &self.cfg.plant,
                    dt,
                    self.cfg.integrator,
                )?;
            }
            acc[0] += t_out;
            acc[1] += zones[0].t_space;
            acc[2] += zones[1].t_space;
            acc[3] += p_ite;
            acc[4] += p_hvac;
        }
        let inv = 1.0 / n as f64;
        let mut obs = Observation::from_array(acc.map(|v| v * inv));
        if self.cfg.sensor_noise_c > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.noise_seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let s = self.cfg.sensor_noise_c * 3.0f64.sqrt();
            obs.t_west += rng.gen_range(-s..s);
            obs.t_east += rng.gen_range(-s..s);
        }
        self.zones = zones;
        self.minute += self.cfg.control_minutes;
        self.step += 1;
        let reward = reward(&obs, &self.cfg.reward);
        Ok(Some(StepOutcome {
            observation: obs,
            reward,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_env(load_w: f64, load_e: f64, t_out: f64) -> Environment {
        Environment::new(
            EnvConfig::default(),
            Trace::constant_weather(t_out, 0.009, 15.0, 4000),
            Trace::constant_load(load_w, 15.0, 4000),
            Trace::constant_load(load_e, 15.0, 4000),
        )
        .unwrap()
    }

    #[test]
    fn identical_zones_stay_identical() {
        let mut env = constant_env(15000.0, 15000.0, 28.0);
        let a = RawAction::new(22.0, 22.0, 5.0, 5.0);
        for _ in 0..200 {
            let out = env.step(&a).unwrap().unwrap();
            assert_eq!(out.observation.t_west, out.observation.t_east);
        }
    }

    #[test]
    fn mirrored_inputs_mirror_observations() {
        let mut a_env = constant_env(12000.0, 18000.0, 26.0);
        let mut b_env = constant_env(18000.0, 12000.0, 26.0);
        for i in 0..50 {
            let ts = 21.0 + 0.01 * i as f64;
            let a = a_env.step(&RawAction::new(ts, 22.5, 4.0, 7.0)).unwrap().unwrap();
            let b = b_env.step(&RawAction::new(22.5, ts, 7.0, 4.0)).unwrap().unwrap();
            assert_eq!(a.observation.t_west, b.observation.t_east);
            assert_eq!(a.observation.t_east, b.observation.t_west);
            assert_eq!(a.observation.p_hvac, b.observation.p_hvac);
        }
    }

    #[test]
    fn constant_conditions_reach_fixed_point() {
        let mut env = constant_env(15000.0, 10000.0, 27.0);
        let a = RawAction::new(22.0, 21.0, 6.0, 3.0);
        let mut prev = env.step(&a).unwrap().unwrap().observation;
        let mut converged = false;
        for _ in 0..3000 {
            let o = env.step(&a).unwrap().unwrap().observation;
            if (o.t_west - prev.t_west).abs() < 1e-6 && (o.t_east - prev.t_east).abs() < 1e-6 {
                converged = true;
                break;
            }
            prev = o;
        }
        assert!(converged);
    }

    #[test]
    fn control_interval_is_fifteen_averaged_substeps() {
        let mut env = constant_env(14000.0, 9000.0, 30.0);
        let cfg = env.config().clone();
        let a = RawAction::new(21.5, 22.5, 4.5, 8.0);
        let mut zones = *env.zones();
        let out = env.step(&a).unwrap().unwrap().observation;

        let loads = [14000.0, 9000.0];
        let sp = [21.5, 22.5];
        let fl = [4.5, 8.0];
        let mut sum = [0.0; 2];
        let mut hvac = 0.0;
        for _ in 0..15 {
            for z in 0..2 {
                let input = cfg.local_loop.control(&zones[z], sp[z], fl[z]);
                hvac += hvac_power(&input, &cfg.plant);
                let exo = Exogenous {
                    t_out: 30.0,
                    w_out: 0.009,
                    q_load: loads[z] * BTU_PER_MIN_PER_WATT,
                    m_load: 0.0,
                };
                zones[z] =
                    step_single_zone(&zones[z], &input, &exo, &cfg.plant, 1.0, Integrator::Euler)
                        .unwrap();
                sum[z] += zones[z].t_space;
            }
        }
        assert!((out.t_west - sum[0] / 15.0).abs() < 1e-12);
        assert!((out.t_east - sum[1] / 15.0).abs() < 1e-12);
        assert!((out.p_hvac - hvac / 15.0).abs() < 1e-9);
        assert_eq!(out.p_ite, 23000.0);
        assert_eq!(out.t_out, 30.0);
    }

    #[test]
    fn exhausted_trace_ends_episode() {
        let mut env = Environment::new(
            EnvConfig::default(),
            Trace::constant_weather(25.0, 0.009, 15.0, 3),
            Trace::constant_load(1000.0, 15.0, 3),
            Trace::constant_load(1000.0, 15.0, 2),
        )
        .unwrap();
        let a = RawAction::new(22.0, 22.0, 5.0, 5.0);
        assert_eq!(env.remaining_steps(), 2);
        assert!(env.step(&a).unwrap().is_some());
        assert!(env.step(&a).unwrap().is_some());
        assert!(env.step(&a).unwrap().is_none());
    }

    #[test]
    fn steps_are_bitwise_reproducible() {
        let cfg = EnvConfig {
            sensor_noise_c: 0.1,
            noise_seed: 9,
            ..EnvConfig::default()
        };
        let mk = || {
            Environment::new(
                cfg.clone(),
                super::super::gen_weather(2, &Default::default(), 15.0, 1).unwrap(),
                super::super::gen_ite_load(2, 15000.0, 0.05, 15.0, 2).unwrap(),
                super::super::gen_ite_load(2, 15000.0, 0.05, 15.0, 3).unwrap(),
            )
            .unwrap()
        };
        let (mut a, mut b) = (mk(), mk());
        let act = RawAction::new(21.0, 22.0, 5.0, 6.0);
        for _ in 0..96 {
            let x = a.step(&act).unwrap().unwrap();
            let y = b.step(&act).unwrap().unwrap();
            assert_eq!(x.observation.to_array().map(f64::to_bits), y.observation.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn halving_substep_changes_day_end_temperature_little() {
        let run = |dt: f64| {
            let cfg = EnvConfig {
                substep_minutes: dt,
                ..EnvConfig::default()
            };
            let mut env = Environment::new(
                cfg,
                super::super::gen_weather(2, &Default::default(), 15.0, 4).unwrap(),
                super::super::gen_ite_load(2, 20000.0, 0.05, 15.0, 5).unwrap(),
                super::super::gen_ite_load(2, 20000.0, 0.05, 15.0, 6).unwrap(),
            )
            .unwrap();
            for i in 0..96 {
                let ts = if (i / 8) % 2 == 0 { 21.0 } else { 22.5 };
                env.step(&RawAction::new(ts, 22.0, 3.0 + (i % 5) as f64, 6.0)).unwrap();
            }
            *env.zones()
        };
        let coarse = run(1.0);
        let fine = run(0.5);
        for z in 0..2 {
            assert!((coarse[z].t_space - fine[z].t_space).abs() < 0.05);
        }
    }
}
