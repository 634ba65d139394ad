//! C ABI over the simulator, trained dynamics models, the planner and
//! cloned policies.
//!
//! Every function returns an [`HvacStatus`]; on failure a description is
//! kept per thread and can be read with [`hvac_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hvac_mbrl::config::ExperimentConfig;
use hvac_mbrl::dynamics::DynamicsModel;
use hvac_mbrl::imitation::Policy;
use hvac_mbrl::mpc::{decode_action, plan, History, PlanConfig, SafeActionSpace};
use hvac_mbrl::plant::Environment;
use hvac_mbrl::{Error, Observation, RawAction, ACT_DIM, OBS_DIM};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Numeric = 6,
    InsufficientData = 7,
    /// The environment's traces are used up.
    Exhausted = 8,
    Panic = 9,
}

impl From<&Error> for HvacStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => HvacStatus::Io,
            Error::Parse { .. } | Error::Validation { .. } | Error::Config(_) => HvacStatus::Parse,
            Error::Checkpoint(_) => HvacStatus::Checkpoint,
            Error::Numeric { .. } | Error::Integration { .. } | Error::DivisionGuard { .. } => HvacStatus::Numeric,
            Error::InsufficientData(_) | Error::EmptyBuffer(_) => HvacStatus::InsufficientData,
            Error::TraceExhausted { .. } => HvacStatus::Exhausted,
            Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::ActionOutOfBounds { .. } => {
                HvacStatus::InvalidArgument
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(HvacStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(HvacStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HvacStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HvacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HvacStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            HvacStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(HvacStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn observations(v: &[f64]) -> Vec<Observation> {
    v.chunks_exact(OBS_DIM).map(Observation::from_slice).collect()
}

fn actions(v: &[f64]) -> Vec<RawAction> {
    v.chunks_exact(ACT_DIM).map(RawAction::from_slice).collect()
}

/// Copy the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn hvac_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Simulated two-zone plant.
pub struct HvacEnv(Environment);

/// Build an environment from a TOML experiment configuration; `config`
/// may be null for all defaults. `seed` overrides the trace seed.
#[no_mangle]
pub unsafe extern "C" fn hvac_env_new(config: *const c_char, seed: u64, env: *mut *mut HvacEnv) -> HvacStatus {
    guard(|| {
        if env.is_null() {
            return Err(null("env"));
        }
        let mut cfg = if config.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::load(path(config)?)?
        };
        cfg.traces.seed = seed;
        *env = Box::into_raw(Box::new(HvacEnv(cfg.build_env()?)));
        Ok(())
    })
}

/// Advance one control interval with `action` (4 values: TS west, TS
/// east, F west, F east). Writes 5 observation values and the reward.
#[no_mangle]
pub unsafe extern "C" fn hvac_env_step(
    env: *mut HvacEnv,
    action: *const f64,
    obs_out: *mut f64,
    reward_out: *mut f64,
) -> HvacStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(|| null("env"))?;
        let a = RawAction::from_slice(slice(action, ACT_DIM, "action")?);
        let o = out(obs_out, OBS_DIM, "obs_out")?;
        match env.0.step(&a)? {
            Some(step) => {
                o.copy_from_slice(&step.observation.to_array());
                if !reward_out.is_null() {
                    *reward_out = step.reward.total;
                }
                Ok(())
            }
            None => Err(Fail(HvacStatus::Exhausted, "traces exhausted".into())),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn hvac_env_free(env: *mut HvacEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Trained dynamics model.
pub struct HvacModel(DynamicsModel);

#[no_mangle]
pub unsafe extern "C" fn hvac_model_load(file: *const c_char, model: *mut *mut HvacModel) -> HvacStatus {
    guard(|| {
        if model.is_null() {
            return Err(null("model"));
        }
        *model = Box::into_raw(Box::new(HvacModel(DynamicsModel::load(path(file)?)?)));
        Ok(())
    })
}

/// Window length W the model expects.
#[no_mangle]
pub unsafe extern "C" fn hvac_model_window(model: *const HvacModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().window)
}

/// Next observation from `window` rows of observations (`window * 5`
/// values) and actions (`window * 4`).
#[no_mangle]
pub unsafe extern "C" fn hvac_model_predict(
    model: *const HvacModel,
    obs: *const f64,
    acts: *const f64,
    window: usize,
    obs_out: *mut f64,
) -> HvacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = observations(slice(obs, window * OBS_DIM, "obs")?);
        let a = actions(slice(acts, window * ACT_DIM, "acts")?);
        let next = m.0.predict(&o, &a)?;
        out(obs_out, OBS_DIM, "obs_out")?.copy_from_slice(&next.to_array());
        Ok(())
    })
}

/// One planner decision with the default safe action space and reward.
/// `obs` holds the last W observations, `acts` the W-1 actions between
/// them, `prev` the last executed action.
#[no_mangle]
pub unsafe extern "C" fn hvac_plan(
    model: *const HvacModel,
    obs: *const f64,
    acts: *const f64,
    window: usize,
    prev: *const f64,
    samples: usize,
    seed: u64,
    action_out: *mut f64,
) -> HvacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if window == 0 {
            return Err(Fail(HvacStatus::InvalidArgument, "window must be positive".into()));
        }
        let hist = History::new(
            observations(slice(obs, window * OBS_DIM, "obs")?),
            actions(slice(acts, (window - 1) * ACT_DIM, "acts")?),
        )?;
        let a_prev = RawAction::from_slice(slice(prev, ACT_DIM, "prev")?);
        let cfg = PlanConfig {
            samples,
            seed,
            ..PlanConfig::default()
        };
        let space = SafeActionSpace::default();
        let r = plan(&m.0, &hist, &a_prev, &cfg, &Default::default(), &space)?;
        out(action_out, ACT_DIM, "action_out")?.copy_from_slice(&r.action.to_array());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hvac_model_free(model: *mut HvacModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Cloned policy.
pub struct HvacPolicy(Policy);

#[no_mangle]
pub unsafe extern "C" fn hvac_policy_load(file: *const c_char, policy: *mut *mut HvacPolicy) -> HvacStatus {
    guard(|| {
        if policy.is_null() {
            return Err(null("policy"));
        }
        *policy = Box::into_raw(Box::new(HvacPolicy(Policy::load(path(file)?)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hvac_policy_window(policy: *const HvacPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.config().window)
}

/// Policy action: `obs` holds W observations, `prev_acts` the W actions
/// preceding each of them (so the last row is the executed action the
/// output is rate-limited against).
#[no_mangle]
pub unsafe extern "C" fn hvac_policy_act(
    policy: *const HvacPolicy,
    obs: *const f64,
    prev_acts: *const f64,
    window: usize,
    action_out: *mut f64,
) -> HvacStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let o = observations(slice(obs, window * OBS_DIM, "obs")?);
        let a = actions(slice(prev_acts, window * ACT_DIM, "prev_acts")?);
        let last = *a
            .last()
            .ok_or_else(|| Fail(HvacStatus::InvalidArgument, "window must be positive".into()))?;
        let z = p.0.forward(&o, &a)?;
        let action = decode_action(&z, &last, &SafeActionSpace::default())?;
        out(action_out, ACT_DIM, "action_out")?.copy_from_slice(&action.to_array());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hvac_policy_free(policy: *mut HvacPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
