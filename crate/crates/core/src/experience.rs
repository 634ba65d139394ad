//! FIFO trajectory storage, normalization statistics and sliding-window
//! sample extraction.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::types::{Observation, RawAction, ACT_DIM, OBS_DIM};

pub const DEFAULT_CAPACITY: usize = 11520;
pub const FEATURE_DIM: usize = OBS_DIM + ACT_DIM;

/// Observation `o(t)` together with the action `a(t)` applied after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub o: Observation,
    pub a: RawAction,
    pub episode_id: u64,
    pub step_index: u64,
}

impl TrajectoryStep {
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        let (o, a) = (self.o.to_array(), self.a.to_array());
        std::array::from_fn(|i| if i < OBS_DIM { o[i] } else { a[i - OBS_DIM] })
    }

    /// Whether `next` directly follows `self` in the same episode.
    pub fn precedes(&self, next: &TrajectoryStep) -> bool {
        self.episode_id == next.episode_id && self.step_index + 1 == next.step_index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBuffer {
    capacity: usize,
    steps: VecDeque<TrajectoryStep>,
}

impl Default for ExperienceBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ExperienceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            steps: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Append, evicting the oldest step when full.
    pub fn append(&mut self, step: TrajectoryStep) {
        if self.capacity == 0 {
            return;
        }
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back(step);
    }

    pub fn get(&self, i: usize) -> Option<&TrajectoryStep> {
        self.steps.get(i)
    }

    pub fn last(&self) -> Option<&TrajectoryStep> {
        self.steps.back()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &TrajectoryStep> + '_ {
        self.steps.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.encode().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, BUFFER_MAGIC, BUFFER_VERSION, "experience buffer")?;
        let b = Self::decode(&mut r)?;
        r.finish()?;
        Ok(b)
    }

    fn encode(&self) -> Writer {
        let mut w = Writer::new(BUFFER_MAGIC, BUFFER_VERSION);
        w.u64(self.capacity as u64).u64(self.steps.len() as u64);
        for s in &self.steps {
            w.u64(s.episode_id).u64(s.step_index);
            for v in s.features() {
                w.f64(v);
            }
        }
        w
    }

    fn decode(r: &mut Reader) -> Result<Self> {
        let capacity = r.usize()?;
        let n = r.usize()?;
        if n > capacity {
            return Err(Error::Checkpoint("experience buffer: length exceeds capacity".into()));
        }
        let mut b = Self::new(capacity);
        for _ in 0..n {
            let episode_id = r.u64()?;
            let step_index = r.u64()?;
            let mut f = [0.0; FEATURE_DIM];
            for v in &mut f {
                *v = r.f64()?;
            }
            b.append(TrajectoryStep {
                o: Observation::from_slice(&f[..OBS_DIM]),
                a: RawAction::from_slice(&f[OBS_DIM..]),
                episode_id,
                step_index,
            });
        }
        Ok(b)
    }
}

const BUFFER_MAGIC: &[u8; 4] = b"HVXB";
const BUFFER_VERSION: u32 = 1;

/// Per-dimension normalization over the concatenated (observation, action)
/// features, plus a scale for observation deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Population std of one-step observation changes. Deltas are scaled but
    /// not shifted so that a zero network output means "no change".
    pub delta_scale: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Population mean and standard deviation of each column, std floored at
/// `eps`.
pub fn column_stats<'a, I>(rows: I, dim: usize, eps: f64) -> Option<(Vec<f64>, Vec<f64>)>
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt().max(eps)).collect();
    Some((mean, std))
}

pub fn compute_norm_stats(buffer: &ExperienceBuffer) -> Result<NormStats> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer("cannot compute normalization statistics"));
    }
    let eps = DEFAULT_EPSILON;
    let feats: Vec<[f64; FEATURE_DIM]> = buffer.iter().map(|s| s.features()).collect();
    let (mean, std) = column_stats(feats.iter().map(|f| &f[..]), FEATURE_DIM, eps).expect("non-empty");
    let deltas: Vec<[f64; OBS_DIM]> = buffer
        .steps
        .iter()
        .zip(buffer.steps.iter().skip(1))
        .filter(|(a, b)| a.precedes(b))
        .map(|(a, b)| {
            let (x, y) = (a.o.to_array(), b.o.to_array());
            std::array::from_fn(|i| y[i] - x[i])
        })
        .collect();
    let delta_scale = match deltas.is_empty() {
        true => std[..OBS_DIM].to_vec(),
        false => {
            let n = deltas.len() as f64;
            (0..OBS_DIM)
                .map(|i| (deltas.iter().map(|d| d[i] * d[i]).sum::<f64>() / n).sqrt().max(eps))
                .collect()
        }
    };
    Ok(NormStats {
        mean,
        std,
        delta_scale,
        epsilon: eps,
    })
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect())
    }

    /// Normalize the features of one step into `out` (length `FEATURE_DIM`).
    pub fn normalize_into(&self, o: &Observation, a: &RawAction, out: &mut [f64]) {
        let (oa, aa) = (o.to_array(), a.to_array());
        for i in 0..OBS_DIM {
            out[i] = (oa[i] - self.mean[i]) / self.std[i];
        }
        for i in 0..ACT_DIM {
            out[OBS_DIM + i] = (aa[i] - self.mean[OBS_DIM + i]) / self.std[OBS_DIM + i];
        }
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.f64s(&self.mean).f64s(&self.std).f64s(&self.delta_scale).f64(self.epsilon);
    }

    pub(crate) fn decode(r: &mut Reader) -> Result<Self> {
        let s = Self {
            mean: r.f64s()?,
            std: r.f64s()?,
            delta_scale: r.f64s()?,
            epsilon: r.f64()?,
        };
        if s.std.len() != s.mean.len() {
            return Err(Error::Checkpoint("normalization statistics are inconsistent".into()));
        }
        Ok(s)
    }
}

/// `W` consecutive steps and the following observation change.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub obs_window: Vec<Observation>,
    pub act_window: Vec<RawAction>,
    pub target: [f64; OBS_DIM],
    pub episode_id: u64,
    /// Step index of the first window element.
    pub first_step: u64,
}

impl WindowSample {
    pub fn last_obs(&self) -> &Observation {
        self.obs_window.last().expect("window is non-empty")
    }
}

/// Start positions (buffer indices) of every valid window of length `w`.
pub fn window_starts(buffer: &ExperienceBuffer, w: usize) -> Vec<usize> {
    assert!(w >= 1, "window length must be >= 1");
    let mut starts = Vec::new();
    let n = buffer.len();
    let mut run_start = 0;
    for i in 0..=n {
        let breaks = i == n || (i > run_start && !buffer.steps[i - 1].precedes(&buffer.steps[i]));
        if breaks {
            let len = i - run_start;
            if len > w {
                starts.extend(run_start..run_start + (len - w));
            }
            run_start = i;
        }
    }
    starts
}

pub fn make_windows(buffer: &ExperienceBuffer, w: usize) -> Vec<WindowSample> {
    window_starts(buffer, w)
        .into_iter()
        .map(|s| {
            let steps = &buffer.steps;
            let last = steps[s + w - 1].o.to_array();
            let next = steps[s + w].o.to_array();
            WindowSample {
                obs_window: (s..s + w).map(|i| steps[i].o).collect(),
                act_window: (s..s + w).map(|i| steps[i].a).collect(),
                target: std::array::from_fn(|i| next[i] - last[i]),
                episode_id: steps[s].episode_id,
                first_step: steps[s].step_index,
            }
        })
        .collect()
}

/// Chronological split: the first `⌈ratio·N⌉` items train, the rest validate.
pub fn split<T>(samples: &[T], ratio: f64) -> (&[T], &[T]) {
    debug_assert!(ratio > 0.0 && ratio < 1.0);
    let n = samples.len();
    let k = ((ratio * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    samples.split_at(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(v: f64, episode_id: u64, step_index: u64) -> TrajectoryStep {
        TrajectoryStep {
            o: Observation::from_array([v, v + 1.0, v + 2.0, 100.0 + v, 10.0]),
            a: RawAction::new(20.0, 21.0, 5.0, 6.0 + v),
            episode_id,
            step_index,
        }
    }

    fn episode(buf: &mut ExperienceBuffer, id: u64, len: usize) {
        for i in 0..len {
            buf.append(step(i as f64, id, i as u64));
        }
    }

    #[test]
    fn fifo_examples() {
        let mut b = ExperienceBuffer::new(3);
        for v in 1..=4 {
            b.append(step(v as f64, 0, v));
        }
        let kept: Vec<f64> = b.iter().map(|s| s.o.t_out).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);

        let mut b = ExperienceBuffer::default();
        b.append(step(0.0, 0, 0));
        assert_eq!(b.len(), 1);

        let mut b = ExperienceBuffer::default();
        episode(&mut b, 0, DEFAULT_CAPACITY + 1);
        assert_eq!(b.len(), DEFAULT_CAPACITY);
        assert_eq!(b.get(0).unwrap().step_index, 1);
    }

    #[test]
    fn column_stats_examples() {
        let rows = [[1.0], [3.0]];
        let (m, s) = column_stats(rows.iter().map(|r| &r[..]), 1, 1e-6).unwrap();
        assert_eq!((m[0], s[0]), (2.0, 1.0));

        let rows = [[5.0], [5.0], [5.0]];
        let (m, s) = column_stats(rows.iter().map(|r| &r[..]), 1, 1e-6).unwrap();
        assert_eq!(s[0], 1e-6);
        assert_eq!((5.0 - m[0]) / s[0], 0.0);

        let rows = [[1.0], [2.0], [3.0]];
        let (m, s) = column_stats(rows.iter().map(|r| &r[..]), 1, 1e-6).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        for (v, want) in [1.0, 2.0, 3.0].iter().zip([-1.0 / sd, 0.0, 1.0 / sd]) {
            let got = (v - m[0]) / s[0];
            assert!((got - want).abs() < 1e-4);
            assert!((want.abs() - 1.2247).abs() < 1e-4 || want == 0.0);
        }
    }

    #[test]
    fn norm_stats_empty_and_mismatch() {
        assert!(matches!(
            compute_norm_stats(&ExperienceBuffer::new(4)),
            Err(Error::EmptyBuffer(_))
        ));
        let mut b = ExperienceBuffer::new(10);
        episode(&mut b, 0, 5);
        let s = compute_norm_stats(&b).unwrap();
        assert!(matches!(s.normalize(&[1.0]), Err(Error::DimensionMismatch { .. })));
        let z = s.normalize(&s.mean.clone()).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        // constant channel (P_hvac) floors at epsilon
        assert_eq!(s.std[4], DEFAULT_EPSILON);
        // unit steps on t_out give a unit delta scale
        assert!((s.delta_scale[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_counts() {
        let w = 20;
        let mut b = ExperienceBuffer::default();
        episode(&mut b, 0, w + 1);
        assert_eq!(make_windows(&b, w).len(), 1);

        let mut b = ExperienceBuffer::default();
        episode(&mut b, 0, w);
        assert!(make_windows(&b, w).is_empty());

        let mut b = ExperienceBuffer::default();
        episode(&mut b, 0, 25);
        episode(&mut b, 1, 30);
        assert_eq!(make_windows(&b, w).len(), 15);
    }

    #[test]
    fn windows_skip_gaps_and_carry_deltas() {
        let mut b = ExperienceBuffer::default();
        for i in [0u64, 1, 2, 4, 5, 6, 7] {
            b.append(step(i as f64, 0, i));
        }
        let ws = make_windows(&b, 2);
        assert_eq!(ws.len(), 1 + 2);
        assert_eq!(ws[0].target[0], 1.0);
        assert_eq!(ws[1].first_step, 4);
    }

    #[test]
    fn split_examples() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = split(&v, 0.8);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(a, &v[..8]);
        assert_eq!(b, &v[8..]);
        let (a, b) = split(&v[..1], 0.8);
        assert_eq!((a.len(), b.len()), (1, 0));
    }

    #[test]
    fn buffer_checkpoint_round_trip() {
        let mut b = ExperienceBuffer::new(7);
        episode(&mut b, 3, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf.bin");
        b.save(&p).unwrap();
        assert_eq!(ExperienceBuffer::load(&p).unwrap(), b);
        std::fs::write(&p, b"HVXB\x09\0\0\0").unwrap();
        assert!(matches!(ExperienceBuffer::load(&p), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn fifo_keeps_suffix(cap in 1usize..20, n in 0usize..60) {
            let mut b = ExperienceBuffer::new(cap);
            for i in 0..n {
                b.append(step(i as f64, 0, i as u64));
            }
            let got: Vec<u64> = b.iter().map(|s| s.step_index).collect();
            let want: Vec<u64> = (n.saturating_sub(cap)..n).map(|i| i as u64).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn windows_are_consecutive(
            lens in prop::collection::vec(0usize..12, 1..5),
            cap in 5usize..40,
            w in 1usize..6,
        ) {
            let mut b = ExperienceBuffer::new(cap);
            for (e, len) in lens.iter().enumerate() {
                episode(&mut b, e as u64, *len);
            }
            for s in window_starts(&b, w) {
                for k in 0..w {
                    prop_assert!(b.get(s + k).unwrap().precedes(b.get(s + k + 1).unwrap()));
                }
            }
        }

        #[test]
        fn stats_match_recomputation(vals in prop::collection::vec(-100.0f64..100.0, 2..40), cap in 2usize..30) {
            let mut b = ExperienceBuffer::new(cap);
            for (i, v) in vals.iter().enumerate() {
                b.append(step(*v, 0, i as u64));
            }
            let fresh: ExperienceBuffer = {
                let mut f = ExperienceBuffer::new(cap);
                for s in b.iter() {
                    f.append(*s);
                }
                f
            };
            let (x, y) = (compute_norm_stats(&b).unwrap(), compute_norm_stats(&fresh).unwrap());
            for (a, c) in x.mean.iter().zip(&y.mean) {
                prop_assert!((a - c).abs() <= 1e-9);
            }
        }

        #[test]
        fn normalize_round_trip(x in prop::array::uniform9(-1e4f64..1e4)) {
            let mut b = ExperienceBuffer::new(10);
            episode(&mut b, 0, 6);
            let s = compute_norm_stats(&b).unwrap();
            let back = s.denormalize(&s.normalize(&x).unwrap()).unwrap();
            for (a, c) in x.iter().zip(&back) {
                prop_assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }
}
