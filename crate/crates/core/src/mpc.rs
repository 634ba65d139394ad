//! Random-shooting model-predictive control over a safety-constrained action
//! parameterization.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Observation, RawAction, ACT_DIM};

/// Box bounds and per-step rate limits on raw actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafeActionSpace {
    pub a_min: RawAction,
    pub a_max: RawAction,
    pub delta: RawAction,
}

impl Default for SafeActionSpace {
    fn default() -> Self {
        Self {
            a_min: RawAction::new(13.5, 13.5, 2.5, 2.5),
            a_max: RawAction::new(23.5, 23.5, 10.0, 10.0),
            delta: RawAction::new(1.0, 1.0, 1.0, 1.0),
        }
    }
}

const COMPONENTS: [&str; ACT_DIM] = ["TS_west", "TS_east", "F_west", "F_east"];

impl SafeActionSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi, d) = (self.a_min.to_array(), self.a_max.to_array(), self.delta.to_array());
        for i in 0..ACT_DIM {
            if !(lo[i] < hi[i]) || !(d[i] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "action space component {} needs a_min < a_max and delta > 0",
                    COMPONENTS[i]
                )));
            }
        }
        Ok(())
    }

    /// First component outside the box, if any.
    pub fn check_bounds(&self, a: &RawAction) -> Result<()> {
        let (lo, hi, v) = (self.a_min.to_array(), self.a_max.to_array(), a.to_array());
        for i in 0..ACT_DIM {
            if !(v[i] >= lo[i] && v[i] <= hi[i]) {
                return Err(Error::ActionOutOfBounds {
                    component: COMPONENTS[i],
                    value: v[i],
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &RawAction) -> bool {
        self.check_bounds(a).is_ok()
    }

    /// Whether `next` respects the rate limit relative to `prev`.
    pub fn within_rate(&self, prev: &RawAction, next: &RawAction) -> bool {
        let (p, n, d) = (prev.to_array(), next.to_array(), self.delta.to_array());
        (0..ACT_DIM).all(|i| (n[i] - p[i]).abs() <= d[i] * (1.0 + 1e-12))
    }

    /// Midpoint of the box.
    pub fn center(&self) -> RawAction {
        let (lo, hi) = (self.a_min.to_array(), self.a_max.to_array());
        RawAction::from_array(std::array::from_fn(|i| 0.5 * (lo[i] + hi[i])))
    }
}

/// Action increment in `[-1, 1]⁴`, scaled by the rate limit when decoded.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedAction(pub [f64; ACT_DIM]);

impl NormalizedAction {
    pub fn new(z: [f64; ACT_DIM]) -> Result<Self> {
        if z.iter().all(|v| (-1.0..=1.0).contains(v)) {
            Ok(Self(z))
        } else {
            Err(Error::InvalidParameter(format!("normalized action {z:?} outside [-1, 1]")))
        }
    }

    /// Clamp every component into `[-1, 1]`; NaN maps to 0.
    pub fn clamped(z: [f64; ACT_DIM]) -> Self {
        Self(z.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }

    pub fn hold() -> Self {
        Self([0.0; ACT_DIM])
    }
}

/// `clip(Δ·z + a_prev, a_min, a_max)` componentwise.
pub fn decode_action(z: &NormalizedAction, a_prev: &RawAction, space: &SafeActionSpace) -> Result<RawAction> {
    space.check_bounds(a_prev)?;
    Ok(decode_unchecked(&z.0, a_prev, space))
}

fn decode_unchecked(z: &[f64], a_prev: &RawAction, space: &SafeActionSpace) -> RawAction {
    let (p, d) = (a_prev.to_array(), space.delta.to_array());
    let (lo, hi) = (space.a_min.to_array(), space.a_max.to_array());
    RawAction::from_array(std::array::from_fn(|i| (d[i] * z[i] + p[i]).clamp(lo[i], hi[i])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_p: f64,
    pub t_c: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            lambda_p: 1e-5,
            t_c: 23.5,
            t_min: 22.0,
            t_max: 25.0,
            gamma: 1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.lambda_p >= 0.0
            && self.t_min < self.t_c
            && self.t_c < self.t_max
            && (0.0..=1.0).contains(&self.gamma);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid reward parameters {self:?}")))
        }
    }

    pub fn violates(&self, t: f64) -> bool {
        !(t >= self.t_min && t <= self.t_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    pub r_t: f64,
    pub r_p: f64,
    /// West, east.
    pub violations: [bool; 2],
}

pub fn reward(o: &Observation, p: &RewardParams) -> RewardBreakdown {
    let zone = |t: f64| {
        let hinge = (p.t_min - t).max(0.0) + (t - p.t_max).max(0.0);
        (-p.lambda1 * (t - p.t_c).powi(2)).exp() + p.lambda2 * hinge
    };
    let r_t = -(zone(o.t_west) + zone(o.t_east));
    let r_p = -(o.p_ite + o.p_hvac);
    RewardBreakdown {
        total: r_t + p.lambda_p * r_p,
        r_t,
        r_p,
        violations: [p.violates(o.t_west), p.violates(o.t_east)],
    }
}

/// Observation/action context preceding a decision: the last `W`
/// observations and the `W - 1` actions applied between them.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub obs: Vec<Observation>,
    pub act: Vec<RawAction>,
}

impl History {
    pub fn new(obs: Vec<Observation>, act: Vec<RawAction>) -> Result<Self> {
        if obs.is_empty() || act.len() + 1 != obs.len() {
            return Err(Error::DimensionMismatch {
                expected: obs.len().max(1) - 1,
                got: act.len(),
            });
        }
        Ok(Self { obs, act })
    }

    pub fn window(&self) -> usize {
        self.obs.len()
    }

    pub fn current(&self) -> &Observation {
        self.obs.last().expect("history is non-empty")
    }
}

/// Anything that can predict observations along candidate action sequences.
pub trait Predictor {
    fn window(&self) -> usize;

    /// Open-loop predictions `ô(t+1..t+H)` for `batch` candidates. `actions`
    /// and the result are candidate-major (`batch × horizon`).
    fn rollout(
        &self,
        hist: &History,
        actions: &[RawAction],
        batch: usize,
        horizon: usize,
    ) -> Result<Vec<Observation>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    /// Planning treats temperatures within this distance of the comfort
    /// limits as violations, °C.
    pub margin_c: f64,
    /// Candidates scored per model call.
    pub chunk: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            samples: 8192,
            seed: 0,
            margin_c: 0.5,
            chunk: 1024,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter("sample count K must be >= 1".into()));
        }
        if !(self.margin_c >= 0.0) || self.chunk == 0 {
            return Err(Error::InvalidParameter("margin must be >= 0 and chunk >= 1".into()));
        }
        Ok(())
    }
}

/// Score of one candidate sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub reward: f64,
    pub violations: u32,
}

/// Feasible candidates first by reward; otherwise fewest violations, then
/// reward, then lowest index.
pub fn select_best(scores: &[Score]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &scores[b];
                s.violations < cur.violations
                    || (s.violations == cur.violations && s.reward > cur.reward)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// `k` i.i.d. sequences of `horizon` uniform vectors in `[-1, 1]^dim`,
/// flattened candidate-major. Larger `k` extends the same stream.
pub fn random_candidates(k: usize, horizon: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k * horizon * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

fn violation_count(o: &Observation, p: &RewardParams, margin: f64) -> u32 {
    let bad = |t: f64| !(t >= p.t_min + margin && t <= p.t_max - margin);
    bad(o.t_west) as u32 + bad(o.t_east) as u32
}

/// Score every candidate in `zs` (`K × horizon × 4`, candidate-major).
pub fn score_candidates<P: Predictor + ?Sized>(
    model: &P,
    hist: &History,
    zs: &[f64],
    a_prev: &RawAction,
    cfg: &PlanConfig,
    params: &RewardParams,
    space: &SafeActionSpace,
) -> Result<Vec<Score>> {
    cfg.validate()?;
    space.check_bounds(a_prev)?;
    let h = cfg.horizon;
    let per = h * ACT_DIM;
    if !zs.len().is_multiple_of(per) {
        return Err(Error::DimensionMismatch {
            expected: per,
            got: zs.len() % per,
        });
    }
    let k = zs.len() / per;
    let mut scores = Vec::with_capacity(k);
    let mut actions = Vec::with_capacity(cfg.chunk.min(k) * h);
    for start in (0..k).step_by(cfg.chunk) {
        let n = cfg.chunk.min(k - start);
        actions.clear();
        for c in start..start + n {
            let mut prev = *a_prev;
            for j in 0..h {
                let z = &zs[(c * h + j) * ACT_DIM..(c * h + j + 1) * ACT_DIM];
                prev = decode_unchecked(z, &prev, space);
                actions.push(prev);
            }
        }
        let preds = model.rollout(hist, &actions, n, h)?;
        for c in 0..n {
            let mut total = 0.0;
            let mut disc = 1.0;
            let mut viol = 0;
            for o in &preds[c * h..(c + 1) * h] {
                total += disc * reward(o, params).total;
                disc *= params.gamma;
                viol += violation_count(o, params, cfg.margin_c);
            }
            scores.push(Score {
                reward: total,
                violations: viol,
            });
        }
    }
    Ok(scores)
}

/// Decode `z_seq` from `a_prev`, roll the model forward and accumulate the
/// discounted reward and the predicted violation count.
pub fn evaluate_sequence<P: Predictor + ?Sized>(
    model: &P,
    hist: &History,
    z_seq: &[NormalizedAction],
    a_prev: &RawAction,
    cfg: &PlanConfig,
    params: &RewardParams,
    space: &SafeActionSpace,
) -> Result<Score> {
    let cfg = PlanConfig {
        horizon: z_seq.len(),
        ..*cfg
    };
    let zs: Vec<f64> = z_seq.iter().flat_map(|z| z.0).collect();
    Ok(score_candidates(model, hist, &zs, a_prev, &cfg, params, space)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub best_reward: f64,
    pub worst_reward: f64,
    pub mean_reward: f64,
    pub feasible: usize,
    pub selected: usize,
    pub selected_violations: u32,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanResult {
    pub action: RawAction,
    pub z: NormalizedAction,
    pub diagnostics: PlanDiagnostics,
}

/// Random-shooting plan with `cfg.samples` sequences drawn from `cfg.seed`.
pub fn plan<P: Predictor + ?Sized>(
    model: &P,
    hist: &History,
    a_prev: &RawAction,
    cfg: &PlanConfig,
    params: &RewardParams,
    space: &SafeActionSpace,
) -> Result<PlanResult> {
    cfg.validate()?;
    let zs = random_candidates(cfg.samples, cfg.horizon, ACT_DIM, cfg.seed);
    plan_candidates(model, hist, &zs, a_prev, cfg, params, space)
}

/// Plan over an explicit candidate set (`K × horizon × 4`).
pub fn plan_candidates<P: Predictor + ?Sized>(
    model: &P,
    hist: &History,
    zs: &[f64],
    a_prev: &RawAction,
    cfg: &PlanConfig,
    params: &RewardParams,
    space: &SafeActionSpace,
) -> Result<PlanResult> {
    let start = Instant::now();
    let scores = score_candidates(model, hist, zs, a_prev, cfg, params, space)?;
    let best = select_best(&scores).ok_or_else(|| Error::InvalidParameter("no candidates".into()))?;
    let z0: [f64; ACT_DIM] = std::array::from_fn(|i| zs[best * cfg.horizon * ACT_DIM + i]);
    let z = NormalizedAction::clamped(z0);
    let action = decode_action(&z, a_prev, space)?;
    let rewards = scores.iter().map(|s| s.reward);
    let diagnostics = PlanDiagnostics {
        best_reward: rewards.clone().fold(f64::NEG_INFINITY, f64::max),
        worst_reward: rewards.clone().fold(f64::INFINITY, f64::min),
        mean_reward: rewards.sum::<f64>() / scores.len() as f64,
        feasible: scores.iter().filter(|s| s.violations == 0).count(),
        selected: best,
        selected_violations: scores[best].violations,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(PlanResult {
        action,
        z,
        diagnostics,
    })
}
