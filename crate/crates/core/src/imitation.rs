//! Window-input policy cloned from planner decisions with data aggregation.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::dynamics::{half_mse, run_epochs, ModelConfig};
use crate::error::{Error, Result};
use crate::experience::{NormStats, FEATURE_DIM};
use crate::mpc::NormalizedAction;
use crate::nn::{init_params, Network};
use crate::types::{Observation, RawAction, ACT_DIM, OBS_DIM};

/// Policy input window and the planner's first normalized action for it.
///
/// Row `k` pairs observation `o(τ)` with the action `a(τ-1)` that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationPair {
    pub obs_window: Vec<Observation>,
    pub prev_actions: Vec<RawAction>,
    pub label: NormalizedAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationBuffer {
    capacity: usize,
    pairs: VecDeque<ImitationPair>,
}

impl Default for ImitationBuffer {
    fn default() -> Self {
        Self::new(crate::experience::DEFAULT_CAPACITY)
    }
}

impl ImitationBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append with oldest-first eviction.
    pub fn aggregate(&mut self, pair: ImitationPair) {
        if self.capacity == 0 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &ImitationPair> + '_ {
        self.pairs.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(PAIRS_MAGIC, PAIRS_VERSION);
        w.u64(self.capacity as u64).u64(self.pairs.len() as u64);
        for p in &self.pairs {
            w.u64(p.obs_window.len() as u64);
            for (o, a) in p.obs_window.iter().zip(&p.prev_actions) {
                for v in o.to_array().into_iter().chain(a.to_array()) {
                    w.f64(v);
                }
            }
            for v in p.label.0 {
                w.f64(v);
            }
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, PAIRS_MAGIC, PAIRS_VERSION, "imitation buffer")?;
        let capacity = r.usize()?;
        let n = r.usize()?;
        let mut b = Self::new(capacity);
        for _ in 0..n {
            let w = r.usize()?;
            let mut obs_window = Vec::with_capacity(w);
            let mut prev_actions = Vec::with_capacity(w);
            for _ in 0..w {
                let mut f = [0.0; FEATURE_DIM];
                for v in &mut f {
                    *v = r.f64()?;
                }
                obs_window.push(Observation::from_slice(&f[..OBS_DIM]));
                prev_actions.push(RawAction::from_slice(&f[OBS_DIM..]));
            }
            let mut z = [0.0; ACT_DIM];
            for v in &mut z {
                *v = r.f64()?;
            }
            b.aggregate(ImitationPair {
                obs_window,
                prev_actions,
                label: NormalizedAction(z),
            });
        }
        r.finish()?;
        Ok(b)
    }
}

const PAIRS_MAGIC: &[u8; 4] = b"HVXI";
const PAIRS_VERSION: u32 = 1;
const POLICY_MAGIC: &[u8; 4] = b"HVXP";
const POLICY_VERSION: u32 = 1;

/// Same encoder as the dynamics model with a tanh-squashed four-way head
/// initialized to zero, so a fresh policy holds the previous action.
#[derive(Debug, Clone)]
pub struct Policy {
    cfg: ModelConfig,
    net: Network,
    params: Vec<f64>,
    stats: NormStats,
}

impl Policy {
    pub fn new(cfg: ModelConfig, stats: NormStats) -> Result<Self> {
        cfg.validate()?;
        if stats.dim() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: stats.dim(),
            });
        }
        let shape = cfg.net_shape(ACT_DIM, true);
        let net = Network::new(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(&shape, &mut rng, true);
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

    fn encode_window(&self, obs: &[Observation], prev: &[RawAction], out: &mut [f64]) -> Result<()> {
        let w = self.cfg.window;
        if obs.len() != w || prev.len() != w {
            return Err(Error::DimensionMismatch {
                expected: w,
                got: obs.len().min(prev.len()),
            });
        }
        for k in 0..w {
            self.stats
                .normalize_into(&obs[k], &prev[k], &mut out[k * FEATURE_DIM..(k + 1) * FEATURE_DIM]);
        }
        Ok(())
    }

    fn encode(&self, pairs: &[&ImitationPair]) -> Result<(Vec<f64>, Vec<f64>)> {
        let per = self.cfg.window * FEATURE_DIM;
        let mut x = vec![0.0; pairs.len() * per];
        let mut y = Vec::with_capacity(pairs.len() * ACT_DIM);
        for (p, row) in pairs.iter().zip(x.chunks_exact_mut(per)) {
            self.encode_window(&p.obs_window, &p.prev_actions, row)?;
            y.extend_from_slice(&p.label.0);
        }
        Ok((x, y))
    }

    pub fn forward(&self, obs_window: &[Observation], prev_actions: &[RawAction]) -> Result<NormalizedAction> {
        let mut x = vec![0.0; self.cfg.window * FEATURE_DIM];
        self.encode_window(obs_window, prev_actions, &mut x)?;
        let out = self.net.forward(&self.params, &x, 1)?;
        Ok(NormalizedAction::clamped(std::array::from_fn(|i| out[i])))
    }

    pub fn loss(&self, pairs: &[&ImitationPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyBuffer("imitation loss needs at least one pair"));
        }
        let (x, y) = self.encode(pairs)?;
        let out = self.net.forward(&self.params, &x, pairs.len())?;
        Ok(half_mse(&out, &y, pairs.len(), None))
    }

    pub fn gradient(&self, pairs: &[&ImitationPair]) -> Result<(f64, Vec<f64>)> {
        if pairs.is_empty() {
            return Err(Error::EmptyBuffer("imitation gradient needs at least one pair"));
        }
        let (x, y) = self.encode(pairs)?;
        let b = pairs.len();
        let cache = self.net.forward_cached(&self.params, &x, b)?;
        let mut dout = vec![0.0; b * ACT_DIM];
        let loss = half_mse(cache.output(), &y, b, Some(&mut dout));
        let mut grad = vec![0.0; self.params.len()];
        self.net.backward(&self.params, &cache, &dout, &mut grad);
        Ok((loss, grad))
    }

    /// Minibatch descent on the whole buffer; returns per-epoch losses.
    pub fn train(&mut self, buffer: &ImitationBuffer) -> Result<Vec<f64>> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer("imitation buffer"));
        }
        let pairs: Vec<&ImitationPair> = buffer.iter().collect();
        let (x, y) = self.encode(&pairs)?;
        let per = self.cfg.window * FEATURE_DIM;
        let net = &self.net;
        run_epochs(&mut self.params, pairs.len(), &self.cfg, |p, idx, grad| {
            let b = idx.len();
            let mut xb = Vec::with_capacity(b * per);
            let mut yb = Vec::with_capacity(b * ACT_DIM);
            for &i in idx {
                xb.extend_from_slice(&x[i * per..(i + 1) * per]);
                yb.extend_from_slice(&y[i * ACT_DIM..(i + 1) * ACT_DIM]);
            }
            let cache = net.forward_cached(p, &xb, b)?;
            let mut dout = vec![0.0; b * ACT_DIM];
            let l = half_mse(cache.output(), &yb, b, Some(&mut dout));
            net.backward(p, &cache, &dout, grad);
            Ok(l)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(POLICY_MAGIC, POLICY_VERSION);
        w.str(&toml::to_string(&self.cfg).expect("config serializes"));
        self.stats.encode(&mut w);
        w.f64s(&self.params);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, POLICY_MAGIC, POLICY_VERSION, "policy")?;
        let cfg: ModelConfig = toml::from_str(&r.str()?)
            .map_err(|e| Error::Checkpoint(format!("policy: bad config header: {e}")))?;
        let stats = NormStats::decode(&mut r)?;
        let params = r.f64s()?;
        r.finish()?;
        let mut p = Self::new(cfg, stats)?;
        if params.len() != p.params.len() {
            return Err(Error::Checkpoint("policy: parameter count does not match configuration".into()));
        }
        p.params = params;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::Rng;

    fn stats() -> NormStats {
        NormStats {
            mean: vec![20.0, 23.0, 23.0, 3e4, 1e4, 22.0, 22.0, 6.0, 6.0],
            std: vec![3.0, 1.0, 1.0, 5e3, 3e3, 2.0, 2.0, 2.0, 2.0],
            delta_scale: vec![0.3, 0.3, 0.3, 1e3, 1e3],
            epsilon: 1e-6,
        }
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            window: 3,
            hidden: 8,
            architecture: Architecture::Recurrent,
            attention: true,
            batch_size: 16,
            epochs: 30,
            seed: 2,
            ..ModelConfig::default()
        }
    }

    fn random_pair(rng: &mut ChaCha8Rng, w: usize, label: [f64; 4]) -> ImitationPair {
        let obs_window = (0..w)
            .map(|_| {
                Observation::from_array([
                    rng.gen_range(15.0..25.0),
                    rng.gen_range(21.0..25.0),
                    rng.gen_range(21.0..25.0),
                    rng.gen_range(2e4..4e4),
                    rng.gen_range(5e3..2e4),
                ])
            })
            .collect();
        let prev_actions = (0..w)
            .map(|_| {
                RawAction::new(
                    rng.gen_range(13.5..23.5),
                    rng.gen_range(13.5..23.5),
                    rng.gen_range(2.5..10.0),
                    rng.gen_range(2.5..10.0),
                )
            })
            .collect();
        ImitationPair {
            obs_window,
            prev_actions,
            label: NormalizedAction(label),
        }
    }

    #[test]
    fn fresh_policy_holds() {
        let p = Policy::new(cfg(), stats()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = random_pair(&mut rng, 3, [0.0; 4]);
        let z = p.forward(&pair.obs_window, &pair.prev_actions).unwrap();
        assert_eq!(z, NormalizedAction::hold());
        assert_eq!(z, p.forward(&pair.obs_window, &pair.prev_actions).unwrap());
    }

    #[test]
    fn output_is_squashed_for_random_weights() {
        let mut p = Policy::new(cfg(), stats()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in p.params_mut() {
            *v = rng.gen_range(-5.0..5.0);
        }
        for _ in 0..20 {
            let pair = random_pair(&mut rng, 3, [0.0; 4]);
            let z = p.forward(&pair.obs_window, &pair.prev_actions).unwrap();
            assert!(z.0.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn loss_definition_and_gradient() {
        let mut p = Policy::new(cfg(), stats()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = random_pair(&mut rng, 3, [0.2, -0.4, 0.0, 0.6]);
        // zero head: error is the label itself
        let l = p.loss(&[&pair]).unwrap();
        assert!((l - 0.5 * (0.04 + 0.16 + 0.36)).abs() < 1e-12);
        let hold = random_pair(&mut rng, 3, [0.0; 4]);
        assert_eq!(p.loss(&[&hold]).unwrap(), 0.0);

        for v in p.params_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let pairs: Vec<ImitationPair> = (0..4).map(|_| random_pair(&mut rng, 3, [0.3, 0.1, -0.2, 0.5])).collect();
        let refs: Vec<&ImitationPair> = pairs.iter().collect();
        let (_, g) = p.gradient(&refs).unwrap();
        for i in 0..g.len() {
            let base = p.params()[i];
            p.params_mut()[i] = base + 1e-5;
            let up = p.loss(&refs).unwrap();
            p.params_mut()[i] = base - 1e-5;
            let dn = p.loss(&refs).unwrap();
            p.params_mut()[i] = base;
            let fd = (up - dn) / 2e-5;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn learns_constant_label_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = ImitationBuffer::new(1000);
        for _ in 0..400 {
            buf.aggregate(random_pair(&mut rng, 3, [0.5, -0.25, 0.1, 0.0]));
        }
        let fit = ModelConfig {
            optimizer: crate::dynamics::Optimizer::Adam,
            learning_rate: 3e-3,
            ..cfg()
        };
        let mut p = Policy::new(fit, stats()).unwrap();
        let mut q = p.clone();
        let untouched = ModelConfig { epochs: 0, ..cfg() };
        let mut r = Policy::new(untouched, stats()).unwrap();
        let before = r.params().to_vec();
        r.train(&buf).unwrap();
        assert_eq!(r.params(), &before[..]);

        p.train(&buf).unwrap();
        q.train(&buf).unwrap();
        assert_eq!(p.params(), q.params());
        let pairs: Vec<&ImitationPair> = buf.iter().collect();
        // label variance is zero, so the optimum loss is zero
        let loss = p.loss(&pairs).unwrap();
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn buffer_fifo_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = ImitationBuffer::new(2);
        assert!(b.is_empty());
        let first = random_pair(&mut rng, 3, [0.1, 0.2, 0.3, 0.4]);
        b.aggregate(first.clone());
        assert_eq!(b.len(), 1);
        assert_eq!(b.iter().next().unwrap().label, first.label);
        b.aggregate(random_pair(&mut rng, 3, [0.0; 4]));
        b.aggregate(random_pair(&mut rng, 3, [-0.5; 4]));
        assert_eq!(b.len(), 2);
        assert_ne!(b.iter().next().unwrap(), &first);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.bin");
        b.save(&path).unwrap();
        assert_eq!(ImitationBuffer::load(&path).unwrap(), b);

        let p = Policy::new(cfg(), stats()).unwrap();
        let pp = dir.path().join("policy.bin");
        p.save(&pp).unwrap();
        assert_eq!(Policy::load(&pp).unwrap().params(), p.params());
    }
}
