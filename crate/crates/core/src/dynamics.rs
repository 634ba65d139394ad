//! Learned one-step dynamics: a window of normalized (observation, action)
//! pairs maps to the scaled change of the next observation.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::experience::{
    compute_norm_stats, make_windows, split, ExperienceBuffer, NormStats, TrajectoryStep,
    WindowSample, FEATURE_DIM,
};
use crate::mpc::{History, Predictor};
use crate::nn::{init_params, Architecture, NetShape, Network};
use crate::types::{Observation, RawAction, OBS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub hidden: usize,
    pub architecture: Architecture,
    pub attention: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    /// Learning-rate multiplier reached in the last epoch, decaying linearly
    /// from 1 in the first.
    pub lr_final_fraction: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 20,
            hidden: 64,
            architecture: Architecture::Recurrent,
            attention: true,
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 30,
            optimizer: Optimizer::Adam,
            lr_final_fraction: 0.1,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.window >= 1
            && self.hidden >= 1
            && self.learning_rate > 0.0
            && self.lr_final_fraction > 0.0
            && self.batch_size >= 1
            && self.train_ratio > 0.0
            && self.train_ratio < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid model configuration {self:?}")))
        }
    }

    pub(crate) fn net_shape(&self, output_dim: usize, squash: bool) -> NetShape {
        NetShape {
            arch: self.architecture,
            input_dim: FEATURE_DIM,
            window: self.window,
            hidden: self.hidden,
            attention: self.attention,
            output_dim,
            squash,
        }
    }
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Stepper {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    pub fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, lr, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Mean over rows of `½‖pred − target‖²`; writes `(pred − target)/B` into
/// `dout` when given.
pub(crate) fn half_mse(pred: &[f64], target: &[f64], batch: usize, dout: Option<&mut [f64]>) -> f64 {
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    match dout {
        Some(d) => {
            for ((g, p), t) in d.iter_mut().zip(pred).zip(target) {
                let e = p - t;
                loss += e * e;
                *g = e * inv;
            }
        }
        None => {
            for (p, t) in pred.iter().zip(target) {
                loss += (p - t) * (p - t);
            }
        }
    }
    0.5 * loss * inv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over the training split before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the training split after the last update.
    pub final_train_loss: f64,
    /// Loss over the validation split, when it is non-empty.
    pub val_loss: Option<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Shuffled minibatch descent shared by the dynamics model and the policy.
/// `loss_grad(indices, grad)` returns the batch loss and accumulates its
/// gradient into the zeroed `grad`.
pub(crate) fn run_epochs<F>(
    params: &mut [f64],
    n: usize,
    cfg: &ModelConfig,
    mut loss_grad: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[usize], &mut [f64]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut stepper = Stepper::new(cfg.optimizer, cfg.learning_rate, params.len());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = match cfg.epochs {
            1 => 0.0,
            e => epoch as f64 / (e - 1) as f64,
        };
        stepper.lr = cfg.learning_rate * (1.0 + (cfg.lr_final_fraction - 1.0) * progress);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = loss_grad(params, idx, &mut grad)?;
            total += l * idx.len() as f64;
            stepper.step(params, &grad);
        }
        let mean = total / n as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Encoded training tensors: inputs `N × W × FEATURE_DIM`, targets `N × OBS_DIM`.
struct Encoded {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
}

impl Encoded {
    fn gather(&self, idx: &[usize], per_in: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * per_in);
        let mut y = Vec::with_capacity(idx.len() * OBS_DIM);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * per_in..(i + 1) * per_in]);
            y.extend_from_slice(&self.targets[i * OBS_DIM..(i + 1) * OBS_DIM]);
        }
        (x, y)
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    cfg: ModelConfig,
    net: Network,
    params: Vec<f64>,
    stats: NormStats,
}

impl DynamicsModel {
    /// Randomly initialized model.
    pub fn new(cfg: ModelConfig, stats: NormStats) -> Result<Self> {
        Self::build(cfg, stats, false)
    }

    /// Model whose output layer is zero, so it predicts persistence.
    pub fn persistence(cfg: ModelConfig, stats: NormStats) -> Result<Self> {
        Self::build(cfg, stats, true)
    }

    fn build(cfg: ModelConfig, stats: NormStats, zero_output: bool) -> Result<Self> {
        cfg.validate()?;
        if stats.dim() != FEATURE_DIM || stats.delta_scale.len() != OBS_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: stats.dim(),
            });
        }
        let shape = cfg.net_shape(OBS_DIM, false);
        let net = Network::new(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(&shape, &mut rng, zero_output);
        Ok(Self {
            cfg,
            net,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: NormStats) {
        self.stats = stats;
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn encode(&self, samples: &[WindowSample]) -> Result<Encoded> {
        let w = self.cfg.window;
        let per = w * FEATURE_DIM;
        let mut inputs = vec![0.0; samples.len() * per];
        let mut targets = Vec::with_capacity(samples.len() * OBS_DIM);
        for (s, row) in samples.iter().zip(inputs.chunks_exact_mut(per)) {
            if s.obs_window.len() != w || s.act_window.len() != w {
                return Err(Error::DimensionMismatch {
                    expected: w,
                    got: s.obs_window.len(),
                });
            }
            for k in 0..w {
                self.stats.normalize_into(
                    &s.obs_window[k],
                    &s.act_window[k],
                    &mut row[k * FEATURE_DIM..(k + 1) * FEATURE_DIM],
                );
            }
            for i in 0..OBS_DIM {
                targets.push(s.target[i] / self.stats.delta_scale[i]);
            }
        }
        Ok(Encoded {
            inputs,
            targets,
            n: samples.len(),
        })
    }

    /// Predicted `o(t+1)` from the windows ending at `o(t)`, `a(t)`.
    pub fn predict(&self, obs_window: &[Observation], act_window: &[RawAction]) -> Result<Observation> {
        let w = self.cfg.window;
        if obs_window.len() != w || act_window.len() != w {
            return Err(Error::DimensionMismatch {
                expected: w,
                got: obs_window.len().min(act_window.len()),
            });
        }
        let mut x = vec![0.0; w * FEATURE_DIM];
        for k in 0..w {
            self.stats
                .normalize_into(&obs_window[k], &act_window[k], &mut x[k * FEATURE_DIM..(k + 1) * FEATURE_DIM]);
        }
        let out = self.net.forward(&self.params, &x, 1)?;
        let last = obs_window[w - 1].to_array();
        Ok(Observation::from_array(std::array::from_fn(|i| {
            last[i] + out[i] * self.stats.delta_scale[i]
        })))
    }

    pub fn loss(&self, samples: &[WindowSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyBuffer("loss needs at least one sample"));
        }
        let enc = self.encode(samples)?;
        self.loss_encoded(&enc, &self.params)
    }

    fn loss_encoded(&self, enc: &Encoded, params: &[f64]) -> Result<f64> {
        let per = self.cfg.window * FEATURE_DIM;
        let mut total = 0.0;
        let chunk = 512;
        for start in (0..enc.n).step_by(chunk) {
            let b = chunk.min(enc.n - start);
            let x = &enc.inputs[start * per..(start + b) * per];
            let y = &enc.targets[start * OBS_DIM..(start + b) * OBS_DIM];
            let out = self.net.forward(params, x, b)?;
            total += half_mse(&out, y, b, None) * b as f64;
        }
        Ok(total / enc.n as f64)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn gradient(&self, samples: &[WindowSample]) -> Result<(f64, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::EmptyBuffer("gradient needs at least one sample"));
        }
        let enc = self.encode(samples)?;
        let mut grad = vec![0.0; self.params.len()];
        let b = enc.n;
        let cache = self.net.forward_cached(&self.params, &enc.inputs, b)?;
        let mut dout = vec![0.0; b * OBS_DIM];
        let loss = half_mse(cache.output(), &enc.targets, b, Some(&mut dout));
        self.net.backward(&self.params, &cache, &dout, &mut grad);
        Ok((loss, grad))
    }

    /// Recompute normalization from `buffer`, then fit on its windows.
    pub fn train(&mut self, buffer: &ExperienceBuffer) -> Result<TrainReport> {
        self.stats = compute_norm_stats(buffer)?;
        let samples = make_windows(buffer, self.cfg.window);
        self.train_on(&samples)
    }

    /// Fit on `samples` (chronological) with the current statistics.
    pub fn train_on(&mut self, samples: &[WindowSample]) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no training windows of length {}",
                self.cfg.window
            )));
        }
        let (train, val) = split(samples, self.cfg.train_ratio);
        let enc = self.encode(train)?;
        let initial_loss = self.loss_encoded(&enc, &self.params)?;
        let per = self.cfg.window * FEATURE_DIM;
        let net = &self.net;
        let epoch_losses = run_epochs(&mut self.params, enc.n, &self.cfg, |p, idx, grad| {
            let (x, y) = enc.gather(idx, per);
            let b = idx.len();
            let cache = net.forward_cached(p, &x, b)?;
            let mut dout = vec![0.0; b * OBS_DIM];
            let l = half_mse(cache.output(), &y, b, Some(&mut dout));
            net.backward(p, &cache, &dout, grad);
            Ok(l)
        })?;
        let final_train_loss = self.loss_encoded(&enc, &self.params)?;
        let val_loss = match val.is_empty() {
            true => None,
            false => Some(self.loss_encoded(&self.encode(val)?, &self.params)?),
        };
        Ok(TrainReport {
            initial_loss,
            epoch_losses,
            final_train_loss,
            val_loss,
            train_samples: train.len(),
            val_samples: val.len(),
        })
    }

    /// Recursive open-loop prediction of `o(t+1..t+H)` for one action
    /// sequence `a(t..t+H-1)`.
    pub fn open_loop_rollout(&self, hist: &History, actions: &[RawAction]) -> Result<Vec<Observation>> {
        if actions.is_empty() {
            return Err(Error::InvalidParameter("rollout horizon must be >= 1".into()));
        }
        self.rollout(hist, actions, 1, actions.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.encode_checkpoint().save(path)
    }

    pub(crate) fn encode_checkpoint(&self) -> Writer {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        let cfg = toml::to_string(&self.cfg).expect("config serializes");
        w.str(&cfg);
        self.stats.encode(&mut w);
        w.f64s(&self.params);
        w
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, MODEL_MAGIC, MODEL_VERSION, "dynamics model")?;
        let cfg: ModelConfig = toml::from_str(&r.str()?)
            .map_err(|e| Error::Checkpoint(format!("dynamics model: bad config header: {e}")))?;
        let stats = NormStats::decode(&mut r)?;
        let params = r.f64s()?;
        r.finish()?;
        let mut m = Self::new(cfg, stats)?;
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "dynamics model: {} parameters stored, configuration needs {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"HVXM";
const MODEL_VERSION: u32 = 1;

impl Predictor for DynamicsModel {
    fn window(&self) -> usize {
        self.cfg.window
    }

    fn rollout(
        &self,
        hist: &History,
        actions: &[RawAction],
        batch: usize,
        horizon: usize,
    ) -> Result<Vec<Observation>> {
        let w = self.cfg.window;
        if hist.window() != w {
            return Err(Error::DimensionMismatch {
                expected: w,
                got: hist.window(),
            });
        }
        if actions.len() != batch * horizon {
            return Err(Error::DimensionMismatch {
                expected: batch * horizon,
                got: actions.len(),
            });
        }
        let mut hrows = vec![0.0; (w - 1) * FEATURE_DIM];
        for k in 0..w - 1 {
            self.stats.normalize_into(
                &hist.obs[k],
                &hist.act[k],
                &mut hrows[k * FEATURE_DIM..(k + 1) * FEATURE_DIM],
            );
        }
        let scale = &self.stats.delta_scale;
        let now = hist.current().to_array();
        // current predicted observation per candidate
        let mut cur: Vec<[f64; OBS_DIM]> = vec![now; batch];
        let mut preds = vec![[0.0; OBS_DIM]; batch * horizon];
        let outs = self.net.rollout_shared(&self.params, &hrows, batch, horizon, |j, done, rows| {
            if j > 0 {
                for c in 0..batch {
                    let d = &done[((j - 1) * batch + c) * OBS_DIM..((j - 1) * batch + c + 1) * OBS_DIM];
                    for i in 0..OBS_DIM {
                        cur[c][i] += d[i] * scale[i];
                    }
                    preds[c * horizon + j - 1] = cur[c];
                }
            }
            for c in 0..batch {
                let o = Observation::from_array(cur[c]);
                self.stats.normalize_into(
                    &o,
                    &actions[c * horizon + j],
                    &mut rows[c * FEATURE_DIM..(c + 1) * FEATURE_DIM],
                );
            }
        })?;
        let j = horizon - 1;
        for c in 0..batch {
            let d = &outs[(j * batch + c) * OBS_DIM..(j * batch + c + 1) * OBS_DIM];
            for i in 0..OBS_DIM {
                cur[c][i] += d[i] * scale[i];
            }
            preds[c * horizon + j] = cur[c];
        }
        Ok(preds.into_iter().map(Observation::from_array).collect())
    }
}

/// Mean over the horizon of the Euclidean norm of the elementwise relative
/// error.
pub fn deviation_rows<R: AsRef<[f64]>>(predicted: &[R], truth: &[R]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: truth.len().max(1),
            got: predicted.len(),
        });
    }
    let mut total = 0.0;
    for (step, (p, t)) in predicted.iter().zip(truth).enumerate() {
        let (p, t) = (p.as_ref(), t.as_ref());
        let mut sq = 0.0;
        for (component, (pv, tv)) in p.iter().zip(t).enumerate() {
            if tv.abs() < 1e-9 {
                return Err(Error::DivisionGuard {
                    step,
                    component,
                    value: *tv,
                });
            }
            let r = (tv - pv) / tv;
            sq += r * r;
        }
        total += sq.sqrt();
    }
    Ok(total / truth.len() as f64)
}

pub fn deviation(predicted: &[Observation], truth: &[Observation]) -> Result<f64> {
    let p: Vec<[f64; OBS_DIM]> = predicted.iter().map(|o| o.to_array()).collect();
    let t: Vec<[f64; OBS_DIM]> = truth.iter().map(|o| o.to_array()).collect();
    deviation_rows(&p, &t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub mean: f64,
    pub per_start: Vec<f64>,
    /// Start points skipped by the near-zero ground-truth guard.
    pub excluded: usize,
}

/// H-step deviation of `model` along a consecutive trajectory, starting at
/// each index in `starts` (index of `o(t)`; needs `t ≥ W-1` and
/// `t + H < steps.len()`).
pub fn evaluate_deviation<P: Predictor + ?Sized>(
    model: &P,
    steps: &[TrajectoryStep],
    starts: &[usize],
    horizon: usize,
) -> Result<DeviationReport> {
    let w = model.window();
    let mut per_start = Vec::with_capacity(starts.len());
    let mut excluded = 0;
    for &t in starts {
        if t + 1 < w || t + horizon >= steps.len() {
            return Err(Error::InsufficientData(format!(
                "start {t} needs {} steps before and {horizon} after",
                w - 1
            )));
        }
        let seg = &steps[t + 1 - w..=t + horizon];
        if seg.windows(2).any(|p| !p[0].precedes(&p[1])) {
            return Err(Error::InsufficientData(format!("trajectory is not consecutive around step {t}")));
        }
        let hist = History::new(
            steps[t + 1 - w..=t].iter().map(|s| s.o).collect(),
            steps[t + 1 - w..t].iter().map(|s| s.a).collect(),
        )?;
        let actions: Vec<RawAction> = steps[t..t + horizon].iter().map(|s| s.a).collect();
        let truth: Vec<Observation> = steps[t + 1..=t + horizon].iter().map(|s| s.o).collect();
        let pred = model.rollout(&hist, &actions, 1, horizon)?;
        match deviation(&pred, &truth) {
            Ok(d) => per_start.push(d),
            Err(Error::DivisionGuard { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if per_start.is_empty() {
        return Err(Error::InsufficientData("no evaluable start points".into()));
    }
    let mean = per_start.iter().sum::<f64>() / per_start.len() as f64;
    Ok(DeviationReport {
        mean,
        per_start,
        excluded,
    })
}
