//! Single-zone energy-balance model and the two-zone simulated plant built on it.
//!
//! Zone coefficients are kept in the imperial units of the underlying balance
//! equations (ft³, lb, Btu, minutes). Temperatures in [`PlantState`] are °C:
//! every term that is a pure temperature difference is unit-free, and the
//! remaining absolute heating rates (°F/min) are scaled by 5/9 on the way in.

mod env;
mod trace;

pub use env::{EnvConfig, EnvSnapshot, Environment, LocalLoop, StepOutcome};
pub use trace::{gen_ite_load, gen_weather, load_trace, save_trace, Trace, TraceKind, WeatherSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Watts to Btu/min.
pub const BTU_PER_MIN_PER_WATT: f64 = 0.056_869;

/// Chilled-water heat-removal constant of the supply-air balance.
const CHILLER_COEFF: f64 = 6000.0;

const F_PER_C: f64 = 9.0 / 5.0;

pub fn c_to_f(c: f64) -> f64 {
    c * F_PER_C + 32.0
}

pub fn f_to_c(f: f64) -> f64 {
    (f - 32.0) / F_PER_C
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Thermal-space volume, ft³.
    pub v_space: f64,
    /// Heat-exchanger volume, ft³.
    pub v_hx: f64,
    /// Specific heat of air, Btu/(lb·°F).
    pub cp: f64,
    /// Air density, lb/ft³.
    pub rho: f64,
    /// Enthalpy of water vapor, Btu/lb.
    pub h_fg: f64,
    /// Enthalpy of liquid water, Btu/lb.
    pub h_w: f64,
    /// Supply-air humidity ratio, lb/lb.
    pub w_supply: f64,
    /// Fresh-air fraction at the mixing box.
    pub mix_fresh: f64,
    /// Heat-capacity factor dividing the zone load term. The balance
    /// equations carry a literal 0.25 here.
    pub load_factor: f64,
    /// Fan power coefficient, W per (ft³/min)³.
    pub k_fan: f64,
    /// Chiller power coefficient, W per gal/min.
    pub k_chill: f64,
}

impl Default for PlantParams {
    /// Standard air properties and a 50 ft × 50 ft × 10 ft zone. The
    /// remaining values are documented defaults, not measurements.
    fn default() -> Self {
        Self {
            v_space: 50.0 * 50.0 * 10.0,
            v_hx: 8000.0,
            cp: 0.24,
            rho: 0.074,
            h_fg: 1078.0,
            h_w: 40.0,
            w_supply: 0.0085,
            mix_fresh: 0.25,
            load_factor: 0.25,
            k_fan: 3.84e-7,
            k_chill: 9.0e4,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v_space", self.v_space),
            ("v_hx", self.v_hx),
            ("cp", self.cp),
            ("rho", self.rho),
            ("h_fg", self.h_fg),
            ("h_w", self.h_w),
            ("load_factor", self.load_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.w_supply >= 0.0) {
            return Err(Error::InvalidParameter("w_supply must be >= 0".into()));
        }
        if !(self.mix_fresh > 0.0 && self.mix_fresh < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mix_fresh must be in (0, 1), got {}",
                self.mix_fresh
            )));
        }
        if !(self.k_fan >= 0.0 && self.k_chill >= 0.0) {
            return Err(Error::InvalidParameter("power coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// Latent thermal state of one zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Supply-air temperature, °C.
    pub t_supply: f64,
    /// Thermal-space temperature, °C.
    pub t_space: f64,
    /// Thermal-space humidity ratio, lb/lb.
    pub w_space: f64,
}

/// Disturbances acting on one zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exogenous {
    /// Outdoor air temperature, °C.
    pub t_out: f64,
    /// Outdoor humidity ratio, lb/lb.
    pub w_out: f64,
    /// Sensible heat load, Btu/min.
    pub q_load: f64,
    /// Moisture load, lb/min.
    pub m_load: f64,
}

/// Actuator commands of one zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    /// Volumetric air flow, ft³/min.
    pub flow: f64,
    /// Chilled-water flow, gal/min.
    pub gpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

fn derivative(
    s: &PlantState,
    u: &ControlInput,
    exo: &Exogenous,
    p: &PlantParams,
) -> Result<[f64; 3]> {
    let f = u.flow;
    let mix = p.mix_fresh;
    let d_space = f / p.v_space * (s.t_supply - s.t_space)
        + (-p.h_fg * f / (p.cp * p.v_space) * (p.w_supply - s.w_space)
            + (exo.q_load - p.h_fg * exo.m_load) / (p.load_factor * p.cp * p.v_space))
            / F_PER_C;
    let d_w = f / p.v_space * (p.w_supply - s.w_space) + exo.m_load / (p.rho * p.v_space);
    let d_supply = f / p.v_hx * (s.t_space - s.t_supply)
        + mix * f / p.v_hx * (exo.t_out - s.t_space)
        + (-f * p.h_w / (p.cp * p.v_hx) * ((mix * exo.w_out + (1.0 - mix) * s.w_space) - p.w_supply)
            - CHILLER_COEFF * u.gpm / (p.rho * p.cp * p.v_hx))
            / F_PER_C;
    if !d_supply.is_finite() {
        return Err(Error::Integration { component: "t_supply" });
    }
    if !d_space.is_finite() {
        return Err(Error::Integration { component: "t_space" });
    }
    if !d_w.is_finite() {
        return Err(Error::Integration { component: "w_space" });
    }
    Ok([d_supply, d_space, d_w])
}

fn offset(s: &PlantState, d: &[f64; 3], h: f64) -> PlantState {
    PlantState {
        t_supply: s.t_supply + h * d[0],
        t_space: s.t_space + h * d[1],
        w_space: s.w_space + h * d[2],
    }
}

/// Advance one zone by `dt` minutes with the inputs held constant.
pub fn step_single_zone(
    state: &PlantState,
    input: &ControlInput,
    exo: &Exogenous,
    params: &PlantParams,
    dt: f64,
    integrator: Integrator,
) -> Result<PlantState> {
    if dt == 0.0 {
        return Ok(*state);
    }
    let next = match integrator {
        Integrator::Euler => {
            let k1 = derivative(state, input, exo, params)?;
            offset(state, &k1, dt)
        }
        Integrator::Rk4 => {
            let k1 = derivative(state, input, exo, params)?;
            let k2 = derivative(&offset(state, &k1, dt / 2.0), input, exo, params)?;
            let k3 = derivative(&offset(state, &k2, dt / 2.0), input, exo, params)?;
            let k4 = derivative(&offset(state, &k3, dt), input, exo, params)?;
            let mut d = [0.0; 3];
            for i in 0..3 {
                d[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
            }
            offset(state, &d, dt)
        }
    };
    Ok(PlantState {
        w_space: next.w_space.max(0.0),
        ..next
    })
}

/// Electric HVAC demand in W: cubic fan-affinity law plus a linear chiller proxy.
pub fn hvac_power(input: &ControlInput, params: &PlantParams) -> f64 {
    let f = input.flow.max(0.0);
    params.k_fan * f * f * f + params.k_chill * input.gpm.max(0.0)
}
