//! Measurable observation and raw action vectors shared by every layer.

use serde::{Deserialize, Serialize};

pub const OBS_DIM: usize = 5;
pub const ACT_DIM: usize = 4;

/// Averaged sensor readings for one control interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Outdoor air temperature, °C.
    pub t_out: f64,
    /// West zone air temperature, °C.
    pub t_west: f64,
    /// East zone air temperature, °C.
    pub t_east: f64,
    /// IT-equipment electric demand, W.
    pub p_ite: f64,
    /// HVAC electric demand, W.
    pub p_hvac: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [self.t_out, self.t_west, self.t_east, self.p_ite, self.p_hvac]
    }

    pub fn from_array(a: [f64; OBS_DIM]) -> Self {
        Self {
            t_out: a[0],
            t_west: a[1],
            t_east: a[2],
            p_ite: a[3],
            p_hvac: a[4],
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::from_array([s[0], s[1], s[2], s[3], s[4]])
    }

    pub fn total_power(&self) -> f64 {
        self.p_ite + self.p_hvac
    }

    pub fn zone_temps(&self) -> [f64; 2] {
        [self.t_west, self.t_east]
    }
}

/// Setpoint and supply-fan command for both zones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawAction {
    /// West zone setpoint, °C.
    pub ts_west: f64,
    /// East zone setpoint, °C.
    pub ts_east: f64,
    /// West supply-fan flow on the normalized 2.5..10 scale.
    pub f_west: f64,
    /// East supply-fan flow on the normalized 2.5..10 scale.
    pub f_east: f64,
}

impl RawAction {
    pub fn new(ts_west: f64, ts_east: f64, f_west: f64, f_east: f64) -> Self {
        Self {
            ts_west,
            ts_east,
            f_west,
            f_east,
        }
    }

    pub fn to_array(&self) -> [f64; ACT_DIM] {
        [self.ts_west, self.ts_east, self.f_west, self.f_east]
    }

    pub fn from_array(a: [f64; ACT_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }
}
