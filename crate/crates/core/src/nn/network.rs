//! Window-to-vector networks with hand-derived backpropagation.
//!
//! Two architectures share one flat parameter vector convention:
//!
//! * `Recurrent`: a gated recurrent cell of the long-short-term-memory family
//!   runs over the window; additive attention scores every hidden state,
//!   normalizes the scores with a softmax, and the weighted sum of hidden
//!   states feeds a linear output layer. With attention disabled the last
//!   hidden state feeds the output layer directly.
//! * `Feedforward`: the flattened window passes through two tanh layers.
//!
//! Inputs are row-major `batch × window × input_dim`; outputs are
//! `batch × output_dim`, optionally squashed by tanh.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_col_sums, add_row_bias, gemm, sigmoid, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Recurrent,
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub arch: Architecture,
    pub input_dim: usize,
    pub window: usize,
    pub hidden: usize,
    pub attention: bool,
    pub output_dim: usize,
    pub squash: bool,
}

/// Parameter ranges inside the flat vector. Ranges not used by an
/// architecture are empty.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub wx: Range<usize>,
    pub wh: Range<usize>,
    pub b: Range<usize>,
    pub wa: Range<usize>,
    pub ba: Range<usize>,
    pub va: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl NetShape {
    pub fn layout(&self) -> Layout {
        let (i, h, o, w) = (self.input_dim, self.hidden, self.output_dim, self.window);
        let mut a = Alloc(0);
        let mut l = Layout::default();
        match self.arch {
            Architecture::Recurrent => {
                l.wx = a.take(4 * h * i);
                l.wh = a.take(4 * h * h);
                l.b = a.take(4 * h);
                if self.attention {
                    l.wa = a.take(h * h);
                    l.ba = a.take(h);
                    l.va = a.take(h);
                }
            }
            Architecture::Feedforward => {
                l.w1 = a.take(h * w * i);
                l.b1 = a.take(h);
                l.w2 = a.take(h * h);
                l.b2 = a.take(h);
            }
        }
        l.wo = a.take(o * h);
        l.bo = a.take(o);
        l.total = a.0;
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hidden == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "network dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Uniform initialization in ±1/√fan-in per layer. The output layer is
/// zeroed when `zero_output` is set.
pub fn init_params(shape: &NetShape, rng: &mut impl Rng, zero_output: bool) -> Vec<f64> {
    let l = shape.layout();
    let mut p = vec![0.0; l.total];
    let mut fill = |r: &Range<usize>, fan_in: usize, p: &mut Vec<f64>| {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for v in &mut p[r.clone()] {
            *v = rng.gen_range(-bound..bound);
        }
    };
    let (i, h, w) = (shape.input_dim, shape.hidden, shape.window);
    match shape.arch {
        Architecture::Recurrent => {
            for r in [&l.wx, &l.wh, &l.b] {
                fill(r, i + h, &mut p);
            }
            for r in [&l.wa, &l.ba, &l.va] {
                fill(r, h, &mut p);
            }
        }
        Architecture::Feedforward => {
            fill(&l.w1, w * i, &mut p);
            fill(&l.b1, w * i, &mut p);
            fill(&l.w2, h, &mut p);
            fill(&l.b2, h, &mut p);
        }
    }
    if !zero_output {
        fill(&l.wo, h, &mut p);
        fill(&l.bo, h, &mut p);
    }
    p
}

/// Intermediate values kept by [`Network::forward_cached`] for backprop.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    batch: usize,
    inputs: Vec<f64>,
    // recurrent: step-major (window × batch × ·)
    gates: Vec<f64>,
    cells: Vec<f64>,
    tcells: Vec<f64>,
    hs: Vec<f64>,
    us: Vec<f64>,
    alpha: Vec<f64>,
    // feedforward
    a1: Vec<f64>,
    a2: Vec<f64>,
    ctx: Vec<f64>,
    out: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    /// Attention weights, `batch × window` (empty without attention).
    pub fn attention(&self) -> &[f64] {
        &self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    shape: NetShape,
    layout: Layout,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Network {
    pub fn new(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            layout: shape.layout(),
            shape,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn check_dims(&self, params: &[f64], inputs: &[f64], batch: usize) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::DimensionMismatch {
                expected: self.layout.total,
                got: params.len(),
            });
        }
        let per = self.shape.window * self.shape.input_dim;
        if inputs.len() != batch * per {
            return Err(Error::DimensionMismatch {
                expected: batch * per,
                got: inputs.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, inputs, batch)?.out)
    }

    pub fn forward_cached(&self, params: &[f64], inputs: &[f64], batch: usize) -> Result<Cache> {
        self.check_dims(params, inputs, batch)?;
        let mut cache = Cache {
            batch,
            inputs: inputs.to_vec(),
            ..Cache::default()
        };
        match self.shape.arch {
            Architecture::Recurrent => self.forward_recurrent(params, &mut cache),
            Architecture::Feedforward => self.forward_feedforward(params, &mut cache),
        }
        self.output_layer(params, &mut cache);
        if !all_finite(&cache.out) {
            return Err(Error::Numeric {
                layer: self.first_bad_layer(&cache),
            });
        }
        Ok(cache)
    }

    fn first_bad_layer(&self, c: &Cache) -> &'static str {
        if !all_finite(&c.inputs) {
            "input"
        } else if !all_finite(&c.hs) || !all_finite(&c.a1) || !all_finite(&c.a2) {
            "hidden"
        } else if !all_finite(&c.alpha) || !all_finite(&c.us) {
            "attention"
        } else {
            "output"
        }
    }

    fn forward_recurrent(&self, p: &[f64], c: &mut Cache) {
        let NetShape {
            input_dim: ni,
            window: w,
            hidden: h,
            attention,
            ..
        } = self.shape;
        let b = c.batch;
        let g4 = 4 * h;
        let l = &self.layout;
        let (wx, wh, bias) = (&p[l.wx.clone()], &p[l.wh.clone()], &p[l.b.clone()]);

        c.gates = vec![0.0; w * b * g4];
        c.cells = vec![0.0; w * b * h];
        c.tcells = vec![0.0; w * b * h];
        c.hs = vec![0.0; w * b * h];
        for k in 0..w {
            let (done_h, _) = c.hs.split_at(k * b * h);
            let pre = &mut c.gates[k * b * g4..(k + 1) * b * g4];
            let xk = View::strided(&c.inputs[k * ni..], w * ni, 1);
            gemm(b, ni, g4, 1.0, xk, View::tr(wx, ni), 0.0, pre);
            if k > 0 {
                let hprev = &done_h[(k - 1) * b * h..];
                gemm(b, h, g4, 1.0, View::rm(hprev, h), View::tr(wh, h), 1.0, pre);
            }
            add_row_bias(pre, bias);
            let (prev_cells, cur_cells) = c.cells.split_at_mut(k * b * h);
            let c_prev = if k > 0 { Some(&prev_cells[(k - 1) * b * h..]) } else { None };
            lstm_cell(
                pre,
                c_prev,
                h,
                &mut cur_cells[..b * h],
                &mut c.tcells[k * b * h..(k + 1) * b * h],
                &mut c.hs[k * b * h..(k + 1) * b * h],
            );
        }

        c.ctx = vec![0.0; b * h];
        if attention {
            let (wa, ba, va) = (&p[l.wa.clone()], &p[l.ba.clone()], &p[l.va.clone()]);
            c.us = vec![0.0; w * b * h];
            let mut scores = vec![0.0; b * w];
            for k in 0..w {
                let hk = &c.hs[k * b * h..(k + 1) * b * h];
                let uk = &mut c.us[k * b * h..(k + 1) * b * h];
                gemm(b, h, h, 1.0, View::rm(hk, h), View::tr(wa, h), 0.0, uk);
                add_row_bias(uk, ba);
                for (s, row) in uk.chunks_exact_mut(h).enumerate() {
                    let mut acc = 0.0;
                    for (u, v) in row.iter_mut().zip(va) {
                        *u = u.tanh();
                        acc += *u * v;
                    }
                    scores[s * w + k] = acc;
                }
            }
            softmax_rows(&mut scores, w);
            for s in 0..b {
                let ctx = &mut c.ctx[s * h..(s + 1) * h];
                for k in 0..w {
                    let a = scores[s * w + k];
                    let hk = &c.hs[(k * b + s) * h..(k * b + s + 1) * h];
                    for (cv, hv) in ctx.iter_mut().zip(hk) {
                        *cv += a * hv;
                    }
                }
            }
            c.alpha = scores;
        } else {
            c.ctx.copy_from_slice(&c.hs[(w - 1) * b * h..]);
        }
    }

    fn forward_feedforward(&self, p: &[f64], c: &mut Cache) {
        let NetShape {
            input_dim: ni,
            window: w,
            hidden: h,
            ..
        } = self.shape;
        let b = c.batch;
        let l = &self.layout;
        let d = w * ni;
        c.a1 = vec![0.0; b * h];
        gemm(b, d, h, 1.0, View::rm(&c.inputs, d), View::tr(&p[l.w1.clone()], d), 0.0, &mut c.a1);
        add_row_bias(&mut c.a1, &p[l.b1.clone()]);
        c.a1.iter_mut().for_each(|v| *v = v.tanh());
        c.a2 = vec![0.0; b * h];
        gemm(b, h, h, 1.0, View::rm(&c.a1, h), View::tr(&p[l.w2.clone()], h), 0.0, &mut c.a2);
        add_row_bias(&mut c.a2, &p[l.b2.clone()]);
        c.a2.iter_mut().for_each(|v| *v = v.tanh());
        c.ctx = c.a2.clone();
    }

    fn output_layer(&self, p: &[f64], c: &mut Cache) {
        let (h, o) = (self.shape.hidden, self.shape.output_dim);
        let l = &self.layout;
        c.out = vec![0.0; c.batch * o];
        gemm(c.batch, h, o, 1.0, View::rm(&c.ctx, h), View::tr(&p[l.wo.clone()], h), 0.0, &mut c.out);
        add_row_bias(&mut c.out, &p[l.bo.clone()]);
        if self.shape.squash {
            c.out.iter_mut().for_each(|v| *v = v.tanh());
        }
    }

    /// Accumulate into `grad` the gradient of `Σ dout · output` with respect
    /// to every parameter.
    pub fn backward(&self, params: &[f64], cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let (h, o) = (self.shape.hidden, self.shape.output_dim);
        let b = cache.batch;
        let l = &self.layout;
        assert_eq!(dout.len(), b * o);
        assert_eq!(grad.len(), l.total);

        let dpre: Vec<f64> = if self.shape.squash {
            dout.iter().zip(&cache.out).map(|(d, y)| d * (1.0 - y * y)).collect()
        } else {
            dout.to_vec()
        };
        gemm(o, b, h, 1.0, View::tr(&dpre, o), View::rm(&cache.ctx, h), 1.0, &mut grad[l.wo.clone()]);
        add_col_sums(&dpre, &mut grad[l.bo.clone()]);
        let mut dctx = vec![0.0; b * h];
        gemm(b, o, h, 1.0, View::rm(&dpre, o), View::rm(&params[l.wo.clone()], h), 0.0, &mut dctx);

        match self.shape.arch {
            Architecture::Recurrent => self.backward_recurrent(params, cache, &dctx, grad),
            Architecture::Feedforward => self.backward_feedforward(params, cache, dctx, grad),
        }
    }

    fn backward_feedforward(&self, p: &[f64], c: &Cache, mut d2: Vec<f64>, grad: &mut [f64]) {
        let NetShape {
            input_dim: ni,
            window: w,
            hidden: h,
            ..
        } = self.shape;
        let b = c.batch;
        let l = &self.layout;
        let d = w * ni;
        for (g, a) in d2.iter_mut().zip(&c.a2) {
            *g *= 1.0 - a * a;
        }
        gemm(h, b, h, 1.0, View::tr(&d2, h), View::rm(&c.a1, h), 1.0, &mut grad[l.w2.clone()]);
        add_col_sums(&d2, &mut grad[l.b2.clone()]);
        let mut d1 = vec![0.0; b * h];
        gemm(b, h, h, 1.0, View::rm(&d2, h), View::rm(&p[l.w2.clone()], h), 0.0, &mut d1);
        for (g, a) in d1.iter_mut().zip(&c.a1) {
            *g *= 1.0 - a * a;
        }
        gemm(h, b, d, 1.0, View::tr(&d1, h), View::rm(&c.inputs, d), 1.0, &mut grad[l.w1.clone()]);
        add_col_sums(&d1, &mut grad[l.b1.clone()]);
    }

    fn backward_recurrent(&self, p: &[f64], c: &Cache, dctx: &[f64], grad: &mut [f64]) {
        let NetShape {
            input_dim: ni,
            window: w,
            hidden: h,
            attention,
            ..
        } = self.shape;
        let b = c.batch;
        let g4 = 4 * h;
        let l = &self.layout;

        // Gradient flowing into each hidden state from the attention/output path.
        let mut dhs = vec![0.0; w * b * h];
        if attention {
            let (wa, va) = (&p[l.wa.clone()], &p[l.va.clone()]);
            let mut dalpha = vec![0.0; b * w];
            for s in 0..b {
                let dc = &dctx[s * h..(s + 1) * h];
                for k in 0..w {
                    let idx = (k * b + s) * h;
                    let hk = &c.hs[idx..idx + h];
                    dalpha[s * w + k] = dc.iter().zip(hk).map(|(x, y)| x * y).sum();
                    let a = c.alpha[s * w + k];
                    for (dh, g) in dhs[idx..idx + h].iter_mut().zip(dc) {
                        *dh += a * g;
                    }
                }
            }
            // softmax backward: ds = α ⊙ (dα − Σ α dα)
            let mut ds = vec![0.0; b * w];
            for s in 0..b {
                let a = &c.alpha[s * w..(s + 1) * w];
                let da = &dalpha[s * w..(s + 1) * w];
                let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for k in 0..w {
                    ds[s * w + k] = a[k] * (da[k] - dot);
                }
            }
            let mut dpre_u = vec![0.0; b * h];
            for k in 0..w {
                let uk = &c.us[k * b * h..(k + 1) * b * h];
                let gva = &mut grad[l.va.clone()];
                for s in 0..b {
                    let d = ds[s * w + k];
                    let urow = &uk[s * h..(s + 1) * h];
                    for (g, u) in gva.iter_mut().zip(urow) {
                        *g += d * u;
                    }
                    for j in 0..h {
                        dpre_u[s * h + j] = d * va[j] * (1.0 - urow[j] * urow[j]);
                    }
                }
                let hk = &c.hs[k * b * h..(k + 1) * b * h];
                gemm(h, b, h, 1.0, View::tr(&dpre_u, h), View::rm(hk, h), 1.0, &mut grad[l.wa.clone()]);
                add_col_sums(&dpre_u, &mut grad[l.ba.clone()]);
                gemm(b, h, h, 1.0, View::rm(&dpre_u, h), View::rm(wa, h), 1.0, &mut dhs[k * b * h..(k + 1) * b * h]);
            }
        } else {
            dhs[(w - 1) * b * h..].copy_from_slice(dctx);
        }

        let wh = &p[l.wh.clone()];
        let mut dh_next = vec![0.0; b * h];
        let mut dc_next = vec![0.0; b * h];
        let mut dgp = vec![0.0; b * g4];
        for k in (0..w).rev() {
            let gates = &c.gates[k * b * g4..(k + 1) * b * g4];
            let tc = &c.tcells[k * b * h..(k + 1) * b * h];
            let dhk = &dhs[k * b * h..(k + 1) * b * h];
            for s in 0..b {
                let gr = &gates[s * g4..(s + 1) * g4];
                let dg = &mut dgp[s * g4..(s + 1) * g4];
                for j in 0..h {
                    let idx = s * h + j;
                    let (ig, fg, gg, og) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let dh = dhk[idx] + dh_next[idx];
                    let t = tc[idx];
                    let d_o = dh * t;
                    let dc = dc_next[idx] + dh * og * (1.0 - t * t);
                    let c_prev = if k > 0 { c.cells[((k - 1) * b + s) * h + j] } else { 0.0 };
                    dg[j] = dc * gg * ig * (1.0 - ig);
                    dg[h + j] = dc * c_prev * fg * (1.0 - fg);
                    dg[2 * h + j] = dc * ig * (1.0 - gg * gg);
                    dg[3 * h + j] = d_o * og * (1.0 - og);
                    dc_next[idx] = dc * fg;
                }
            }
            let xk = View::strided(&c.inputs[k * ni..], w * ni, 1);
            gemm(g4, b, ni, 1.0, View::tr(&dgp, g4), xk, 1.0, &mut grad[l.wx.clone()]);
            add_col_sums(&dgp, &mut grad[l.b.clone()]);
            if k > 0 {
                let hprev = &c.hs[(k - 1) * b * h..k * b * h];
                gemm(g4, b, h, 1.0, View::tr(&dgp, g4), View::rm(hprev, h), 1.0, &mut grad[l.wh.clone()]);
                gemm(b, g4, h, 1.0, View::rm(&dgp, g4), View::rm(wh, h), 0.0, &mut dh_next);
            }
        }
    }

    /// Evaluate `steps` consecutive sliding windows for `batch` candidate
    /// continuations of a shared history.
    ///
    /// `hist` holds the `window - 1` input rows common to every candidate.
    /// Window `j` covers the last `window - 1 - j` history rows (when any
    /// remain) followed by candidate rows `0..=j`. `fill(j, outputs, rows)`
    /// writes candidate row `j` for the whole batch (`batch × input_dim`),
    /// given the outputs of windows `0..j` (`j × batch × output_dim`).
    /// Returns all outputs, `steps × batch × output_dim`.
    ///
    /// The recurrent path encodes each history prefix once and shares it
    /// across the batch; it is equal up to rounding to evaluating every
    /// window with [`Network::forward`].
    pub fn rollout_shared<F>(
        &self,
        params: &[f64],
        hist: &[f64],
        batch: usize,
        steps: usize,
        mut fill: F,
    ) -> Result<Vec<f64>>
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        let NetShape {
            input_dim: ni,
            window: w,
            output_dim: no,
            ..
        } = self.shape;
        if hist.len() != (w - 1) * ni {
            return Err(Error::DimensionMismatch {
                expected: (w - 1) * ni,
                got: hist.len(),
            });
        }
        let mut cand = vec![0.0; steps * batch * ni];
        let mut outputs = vec![0.0; steps * batch * no];
        match self.shape.arch {
            Architecture::Feedforward => {
                let mut windows = vec![0.0; batch * w * ni];
                for j in 0..steps {
                    {
                        let (done, rest) = outputs.split_at_mut(j * batch * no);
                        let _ = rest;
                        fill(j, done, &mut cand[j * batch * ni..(j + 1) * batch * ni]);
                    }
                    for s in 0..batch {
                        for pos in 0..w {
                            let e = j + pos;
                            let src = if e < w - 1 {
                                &hist[e * ni..(e + 1) * ni]
                            } else {
                                let ci = e - (w - 1);
                                &cand[(ci * batch + s) * ni..(ci * batch + s + 1) * ni]
                            };
                            windows[(s * w + pos) * ni..(s * w + pos + 1) * ni].copy_from_slice(src);
                        }
                    }
                    let out = self.forward(params, &windows, batch)?;
                    outputs[j * batch * no..(j + 1) * batch * no].copy_from_slice(&out);
                }
            }
            Architecture::Recurrent => {
                for j in 0..steps {
                    {
                        let (done, _) = outputs.split_at_mut(j * batch * no);
                        fill(j, done, &mut cand[j * batch * ni..(j + 1) * batch * ni]);
                    }
                    let out = self.shared_window(params, hist, &cand, batch, j)?;
                    outputs[j * batch * no..(j + 1) * batch * no].copy_from_slice(&out);
                }
            }
        }
        Ok(outputs)
    }

    fn shared_window(
        &self,
        p: &[f64],
        hist: &[f64],
        cand: &[f64],
        batch: usize,
        j: usize,
    ) -> Result<Vec<f64>> {
        let NetShape {
            input_dim: ni,
            window: w,
            hidden: h,
            attention,
            output_dim: no,
            squash,
            ..
        } = self.shape;
        let l = &self.layout;
        let g4 = 4 * h;
        let (wx, wh, bias) = (&p[l.wx.clone()], &p[l.wh.clone()], &p[l.b.clone()]);

        // Shared prefix: history rows j..w-1 from a zero state, batch of one.
        let prefix_len = (w - 1).saturating_sub(j);
        let mut ph = vec![0.0; prefix_len * h];
        let mut h_state = vec![0.0; h];
        let mut c_state = vec![0.0; h];
        let mut gate = vec![0.0; g4];
        for (t, row) in hist[j.min(w - 1) * ni..].chunks_exact(ni).enumerate() {
            gemm(1, ni, g4, 1.0, View::rm(row, ni), View::tr(wx, ni), 0.0, &mut gate);
            if t > 0 {
                gemm(1, h, g4, 1.0, View::rm(&h_state, h), View::tr(wh, h), 1.0, &mut gate);
            }
            add_row_bias(&mut gate, bias);
            cell_step(&mut gate, &mut c_state, &mut h_state, h, t > 0);
            ph[t * h..(t + 1) * h].copy_from_slice(&h_state);
        }

        // Candidate rows lo..=j continue from the prefix state.
        let lo = (j + 1).saturating_sub(w);
        let n_c = j + 1 - lo;
        let mut hs = vec![0.0; n_c * batch * h];
        let mut cs: Vec<f64> = c_state.iter().copied().cycle().take(batch * h).collect();
        let mut pre = vec![0.0; batch * g4];
        let mut tmp_t = vec![0.0; batch * h];
        for (t, ci) in (lo..=j).enumerate() {
            let rows = &cand[ci * batch * ni..(ci + 1) * batch * ni];
            gemm(batch, ni, g4, 1.0, View::rm(rows, ni), View::tr(wx, ni), 0.0, &mut pre);
            let has_prev = t > 0 || prefix_len > 0;
            if t > 0 {
                let hp = &hs[(t - 1) * batch * h..t * batch * h];
                gemm(batch, h, g4, 1.0, View::rm(hp, h), View::tr(wh, h), 1.0, &mut pre);
            } else if prefix_len > 0 {
                gemm(1, h, g4, 1.0, View::rm(&h_state, h), View::tr(wh, h), 0.0, &mut gate);
                for row in pre.chunks_exact_mut(g4) {
                    for (v, g) in row.iter_mut().zip(&gate) {
                        *v += g;
                    }
                }
            }
            add_row_bias(&mut pre, bias);
            let (prev_part, cur) = hs.split_at_mut(t * batch * h);
            let _ = prev_part;
            let cur = &mut cur[..batch * h];
            for s in 0..batch {
                let gr = &mut pre[s * g4..(s + 1) * g4];
                for jj in 0..h {
                    let ig = sigmoid(gr[jj]);
                    let fg = sigmoid(gr[h + jj]);
                    let gg = gr[2 * h + jj].tanh();
                    let og = sigmoid(gr[3 * h + jj]);
                    let idx = s * h + jj;
                    let c_new = if has_prev { fg * cs[idx] + ig * gg } else { ig * gg };
                    cs[idx] = c_new;
                    tmp_t[idx] = c_new.tanh();
                    cur[idx] = og * tmp_t[idx];
                }
            }
        }

        let mut ctx = vec![0.0; batch * h];
        if attention {
            let (wa, ba, va) = (&p[l.wa.clone()], &p[l.ba.clone()], &p[l.va.clone()]);
            let score = |hrow: &[f64], u: &mut [f64]| -> f64 {
                let mut acc = 0.0;
                for (k, uk) in u.iter_mut().enumerate() {
                    let mut z = ba[k];
                    let wrow = &wa[k * h..(k + 1) * h];
                    for (a, b) in wrow.iter().zip(hrow) {
                        z += a * b;
                    }
                    *uk = z.tanh();
                    acc += *uk * va[k];
                }
                acc
            };
            let mut u = vec![0.0; h];
            let pscores: Vec<f64> = ph.chunks_exact(h).map(|r| score(r, &mut u)).collect();
            let mut us = vec![0.0; batch * h];
            let mut weights = vec![0.0; batch * w];
            for t in 0..n_c {
                let ht = &hs[t * batch * h..(t + 1) * batch * h];
                gemm(batch, h, h, 1.0, View::rm(ht, h), View::tr(wa, h), 0.0, &mut us);
                add_row_bias(&mut us, ba);
                for s in 0..batch {
                    let row = &us[s * h..(s + 1) * h];
                    let sc: f64 = row.iter().zip(va).map(|(x, v)| x.tanh() * v).sum();
                    weights[s * w + prefix_len + t] = sc;
                }
            }
            for s in 0..batch {
                weights[s * w..s * w + prefix_len].copy_from_slice(&pscores);
            }
            softmax_rows(&mut weights, w);
            if prefix_len > 0 {
                let pw = View::strided(&weights, w, 1);
                gemm(batch, prefix_len, h, 1.0, pw, View::rm(&ph, h), 0.0, &mut ctx);
            }
            for t in 0..n_c {
                let ht = &hs[t * batch * h..(t + 1) * batch * h];
                for s in 0..batch {
                    let a = weights[s * w + prefix_len + t];
                    for (cv, hv) in ctx[s * h..(s + 1) * h].iter_mut().zip(&ht[s * h..(s + 1) * h]) {
                        *cv += a * hv;
                    }
                }
            }
        } else {
            ctx.copy_from_slice(&hs[(n_c - 1) * batch * h..]);
        }

        let mut out = vec![0.0; batch * no];
        gemm(batch, h, no, 1.0, View::rm(&ctx, h), View::tr(&p[l.wo.clone()], h), 0.0, &mut out);
        add_row_bias(&mut out, &p[l.bo.clone()]);
        if squash {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        if !all_finite(&out) {
            return Err(Error::Numeric { layer: "output" });
        }
        Ok(out)
    }
}

fn lstm_cell(
    pre: &mut [f64],
    c_prev: Option<&[f64]>,
    h: usize,
    cells: &mut [f64],
    tcells: &mut [f64],
    hs: &mut [f64],
) {
    let g4 = 4 * h;
    for (s, gr) in pre.chunks_exact_mut(g4).enumerate() {
        for j in 0..h {
            let ig = sigmoid(gr[j]);
            let fg = sigmoid(gr[h + j]);
            let gg = gr[2 * h + j].tanh();
            let og = sigmoid(gr[3 * h + j]);
            gr[j] = ig;
            gr[h + j] = fg;
            gr[2 * h + j] = gg;
            gr[3 * h + j] = og;
            let idx = s * h + j;
            let c = match c_prev {
                Some(cp) => fg * cp[idx] + ig * gg,
                None => ig * gg,
            };
            cells[idx] = c;
            let t = c.tanh();
            tcells[idx] = t;
            hs[idx] = og * t;
        }
    }
}

fn cell_step(gate: &mut [f64], c: &mut [f64], hstate: &mut [f64], h: usize, has_prev: bool) {
    for j in 0..h {
        let ig = sigmoid(gate[j]);
        let fg = sigmoid(gate[h + j]);
        let gg = gate[2 * h + j].tanh();
        let og = sigmoid(gate[3 * h + j]);
        c[j] = if has_prev { fg * c[j] + ig * gg } else { ig * gg };
        hstate[j] = og * c[j].tanh();
    }
}

fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_exact_mut(cols) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(arch: Architecture, attention: bool, squash: bool) -> NetShape {
        NetShape {
            arch,
            input_dim: 3,
            window: 4,
            hidden: 5,
            attention,
            output_dim: 2,
            squash,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of `Σ dout · f(params)`.
    fn check_gradient(sh: NetShape, seed: u64) {
        let net = Network::new(sh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&sh, &mut rng, false);
        let batch = 3;
        let x = random_vec(&mut rng, batch * sh.window * sh.input_dim);
        let dout = random_vec(&mut rng, batch * sh.output_dim);
        let cache = net.forward_cached(&params, &x, batch).unwrap();
        let mut grad = vec![0.0; params.len()];
        net.backward(&params, &cache, &dout, &mut grad);
        let f = |p: &[f64]| -> f64 {
            let y = net.forward(p, &x, batch).unwrap();
            y.iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-5;
        let mut p = params.clone();
        for i in 0..params.len() {
            p[i] = params[i] + eps;
            let up = f(&p);
            p[i] = params[i] - eps;
            let dn = f(&p);
            p[i] = params[i];
            let fd = (up - dn) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: analytic {} fd {fd} ({sh:?})", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, (arch, att, sq)) in [
            (Architecture::Recurrent, true, false),
            (Architecture::Recurrent, false, false),
            (Architecture::Recurrent, true, true),
            (Architecture::Feedforward, false, false),
            (Architecture::Feedforward, false, true),
        ]
        .into_iter()
        .enumerate()
        {
            check_gradient(shape(arch, att, sq), 10 + i as u64);
        }
    }

    #[test]
    fn attention_weights_form_distribution() {
        let sh = shape(Architecture::Recurrent, true, false);
        let net = Network::new(sh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&sh, &mut rng, false);
        let x = random_vec(&mut rng, 6 * sh.window * sh.input_dim);
        let cache = net.forward_cached(&params, &x, 6).unwrap();
        for row in cache.attention().chunks_exact(sh.window) {
            assert!(row.iter().all(|a| *a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shared_rollout_matches_full_windows() {
        for (att, window, steps) in [(true, 4, 3), (false, 4, 2), (true, 3, 5), (true, 1, 3)] {
            let sh = NetShape {
                window,
                attention: att,
                ..shape(Architecture::Recurrent, att, false)
            };
            let net = Network::new(sh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let params = init_params(&sh, &mut rng, false);
            let ni = sh.input_dim;
            let hist = random_vec(&mut rng, (window - 1) * ni);
            let batch = 4;
            let extra = random_vec(&mut rng, steps * batch * ni);
            // Candidate rows mix fixed noise with the previous output to exercise feedback.
            let fill = |j: usize, done: &[f64], rows: &mut [f64]| {
                for s in 0..batch {
                    for f in 0..ni {
                        let fb = if j > 0 { done[((j - 1) * batch + s) * 2 + f % 2] } else { 0.0 };
                        rows[s * ni + f] = extra[(j * batch + s) * ni + f] + 0.5 * fb;
                    }
                }
            };
            let fast = net.rollout_shared(&params, &hist, batch, steps, fill).unwrap();

            let ff = Network::new(sh).unwrap();
            let mut cand = vec![0.0; steps * batch * ni];
            let mut slow = vec![0.0; steps * batch * 2];
            for j in 0..steps {
                let (done, _) = slow.split_at(j * batch * 2);
                let mut rows = vec![0.0; batch * ni];
                fill(j, done, &mut rows);
                cand[j * batch * ni..(j + 1) * batch * ni].copy_from_slice(&rows);
                let mut win = vec![0.0; batch * window * ni];
                for s in 0..batch {
                    for pos in 0..window {
                        let e = j + pos;
                        let src = if e < window - 1 {
                            &hist[e * ni..(e + 1) * ni]
                        } else {
                            let ci = e - (window - 1);
                            &cand[(ci * batch + s) * ni..(ci * batch + s + 1) * ni]
                        };
                        win[(s * window + pos) * ni..(s * window + pos + 1) * ni].copy_from_slice(src);
                    }
                }
                let out = ff.forward(&params, &win, batch).unwrap();
                slow[j * batch * 2..(j + 1) * batch * 2].copy_from_slice(&out);
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_output_layer_emits_zero() {
        let sh = shape(Architecture::Recurrent, true, true);
        let net = Network::new(sh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&sh, &mut rng, true);
        let x = random_vec(&mut rng, 2 * sh.window * sh.input_dim);
        assert!(net.forward(&params, &x, 2).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let sh = shape(Architecture::Feedforward, false, false);
        let net = Network::new(sh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&sh, &mut rng, false);
        let mut x = random_vec(&mut rng, sh.window * sh.input_dim);
        x[0] = f64::NAN;
        assert!(matches!(net.forward(&params, &x, 1), Err(Error::Numeric { layer: "input" })));
    }
}
