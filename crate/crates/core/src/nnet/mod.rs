//! Feedforward + gated-recurrent policy and value networks.
//!
//! Layer order: `n_feedforward` ReLU layers, an optional GRU layer, then a
//! linear policy head and an optional linear value head, both reading the
//! last hidden layer. Parameters live in one flat vector described by a
//! [`Layout`]; weights are stored `out × in`.
//!
//! The GRU follows the usual gate order `(r, z, n)`:
//! `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z` likewise,
//! `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = h + z ⊙ (n − h)`.
//! With `z = 0` the hidden state passes through unchanged.

pub mod checkpoint;
pub mod real;
pub mod tape;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
pub use real::Real;
use real::{linear, log_softmax_rows, sigmoid};
pub use tape::{Tape, Var};

fn default_hidden() -> usize {
    128
}
fn default_n_ff() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_n_ff")]
    pub n_feedforward: usize,
    #[serde(default = "default_true")]
    pub recurrent: bool,
    /// Zero for a value-only network.
    pub n_actions: usize,
    #[serde(default)]
    pub with_value_head: bool,
}

impl NetArch {
    pub fn new(input_dim: usize, n_actions: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: default_hidden(),
            n_feedforward: default_n_ff(),
            recurrent: true,
            n_actions,
            with_value_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.has_hidden() && self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be at least 1"));
        }
        if self.n_actions == 0 && !self.with_value_head {
            return Err(Error::config("network needs a policy head or a value head"));
        }
        Ok(())
    }

    fn has_hidden(&self) -> bool {
        self.n_feedforward > 0 || self.recurrent
    }

    /// Width of the layer the heads read from.
    pub fn trunk_dim(&self) -> usize {
        if self.has_hidden() {
            self.hidden_dim
        } else {
            self.input_dim
        }
    }

    pub fn state_dim(&self) -> usize {
        if self.recurrent {
            self.hidden_dim
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let mut n = 0;
        let mut width = i;
        for _ in 0..self.n_feedforward {
            n += h * width + h;
            width = h;
        }
        if self.recurrent {
            n += 3 * h * width + 3 * h + 3 * h * h + 3 * h;
        }
        let t = self.trunk_dim();
        n += self.n_actions * t + self.n_actions;
        if self.with_value_head {
            n += t + 1;
        }
        n
    }
}

/// One named matrix (or bias column) inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl Layout {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.entries.push(LayoutEntry {
            name,
            offset: self.total,
            rows,
            cols,
        });
        self.total += rows * cols;
        self.entries.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Gru {
    w_ih: usize,
    b_ih: usize,
    w_hh: usize,
    b_hh: usize,
}

/// Named matrix produced by [`Network::unflatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Hidden state of a recurrent network for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f32>);

impl HiddenState {
    pub fn zeros(arch: &NetArch) -> Self {
        Self(vec![0.0; arch.state_dim()])
    }
}

/// Reusable buffers for [`Network::forward_batch`].
#[derive(Clone, Debug, Default)]
pub struct Scratch<T> {
    a: Vec<T>,
    b: Vec<T>,
    gi: Vec<T>,
    gh: Vec<T>,
}

/// Nodes produced by [`Network::forward_tape`]; rows are time-major.
#[derive(Clone, Copy, Debug)]
pub struct TapeOutputs {
    pub logits: Option<Var>,
    pub values: Option<Var>,
    /// Hidden state after the last step.
    pub final_hidden: Option<Var>,
}

/// `steps × batch` observation sequences for taped evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Sequence<'a, T> {
    pub obs: &'a [T],
    pub steps: usize,
    pub batch: usize,
    /// `batch × hidden_dim`; zeros when absent.
    pub h0: Option<&'a [T]>,
    /// `steps × batch`; `true` zeroes that row's hidden state before the step.
    pub resets: Option<&'a [bool]>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub arch: NetArch,
    pub layout: Layout,
    ff: Vec<Dense>,
    gru: Option<Gru>,
    policy: Option<Dense>,
    value: Option<Dense>,
}

impl Network {
    pub fn new(arch: NetArch) -> Result<Self> {
        arch.validate()?;
        let mut layout = Layout {
            entries: Vec::new(),
            total: 0,
        };
        let h = arch.hidden_dim;
        let mut width = arch.input_dim;
        let mut ff = Vec::new();
        for i in 0..arch.n_feedforward {
            let w = layout.push(format!("ff{i}.weight"), h, width);
            let b = layout.push(format!("ff{i}.bias"), h, 1);
            ff.push(Dense { w, b });
            width = h;
        }
        let gru = arch.recurrent.then(|| Gru {
            w_ih: layout.push("gru.w_ih".into(), 3 * h, width),
            b_ih: layout.push("gru.b_ih".into(), 3 * h, 1),
            w_hh: layout.push("gru.w_hh".into(), 3 * h, h),
            b_hh: layout.push("gru.b_hh".into(), 3 * h, 1),
        });
        let t = arch.trunk_dim();
        let policy = (arch.n_actions > 0).then(|| Dense {
            w: layout.push("policy.weight".into(), arch.n_actions, t),
            b: layout.push("policy.bias".into(), arch.n_actions, 1),
        });
        let value = arch.with_value_head.then(|| Dense {
            w: layout.push("value.weight".into(), 1, t),
            b: layout.push("value.bias".into(), 1, 1),
        });
        debug_assert_eq!(layout.total, arch.param_count());
        Ok(Self {
            arch,
            layout,
            ff,
            gru,
            policy,
            value,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn check_len<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch {
                what: "parameter vector",
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    /// Initial parameters.
    ///
    /// Feedforward and input-to-hidden weights are `U(±1/√fan_in)`, each
    /// hidden-to-hidden gate block is a random orthogonal matrix, the policy
    /// head is `U(±0.01/√fan_in)`, the value head `U(±1/√fan_in)`, and all
    /// biases start at zero.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = rng_from(seed);
        let mut p = vec![0.0f32; self.n_params()];
        let uniform = |e: &LayoutEntry, scale: f64, p: &mut [f32], rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = scale / (e.cols as f64).sqrt();
            for v in &mut p[e.range()] {
                *v = rng.gen_range(-bound..=bound) as f32;
            }
        };
        for d in &self.ff {
            uniform(&self.layout.entries[d.w], 1.0, &mut p, &mut rng);
        }
        if let Some(g) = self.gru {
            uniform(&self.layout.entries[g.w_ih], 1.0, &mut p, &mut rng);
            let e = &self.layout.entries[g.w_hh];
            let h = e.cols;
            for block in 0..3 {
                let q = orthogonal(h, &mut rng);
                let start = e.offset + block * h * h;
                for (dst, &v) in p[start..start + h * h].iter_mut().zip(&q) {
                    *dst = v as f32;
                }
            }
        }
        if let Some(d) = self.policy {
            uniform(&self.layout.entries[d.w], 0.01, &mut p, &mut rng);
        }
        if let Some(d) = self.value {
            uniform(&self.layout.entries[d.w], 1.0, &mut p, &mut rng);
        }
        p
    }

    pub fn unflatten<T: Copy>(&self, params: &[T]) -> Result<Vec<Tensor<T>>> {
        self.check_len(params)?;
        Ok(self
            .layout
            .entries
            .iter()
            .map(|e| Tensor {
                name: e.name.clone(),
                rows: e.rows,
                cols: e.cols,
                data: params[e.range()].to_vec(),
            })
            .collect())
    }

    pub fn flatten<T: Copy>(&self, tensors: &[Tensor<T>]) -> Result<Vec<T>> {
        if tensors.len() != self.layout.entries.len() {
            return Err(Error::ShapeMismatch {
                what: "tensor count",
                expected: self.layout.entries.len(),
                actual: tensors.len(),
            });
        }
        let mut out = Vec::with_capacity(self.n_params());
        for (t, e) in tensors.iter().zip(&self.layout.entries) {
            if t.rows != e.rows || t.cols != e.cols || t.data.len() != e.len() {
                return Err(Error::ShapeMismatch {
                    what: "tensor shape",
                    expected: e.len(),
                    actual: t.data.len(),
                });
            }
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    fn slice<'a, T>(&self, params: &'a [T], idx: usize) -> &'a [T] {
        &params[self.layout.entries[idx].range()]
    }

    fn dense<T: Real>(&self, params: &[T], d: Dense, x: &[T], rows: usize, y: &mut Vec<T>) {
        let e = &self.layout.entries[d.w];
        y.resize(rows * e.rows, T::zero());
        linear(x, rows, self.slice(params, d.w), e.rows, e.cols, Some(self.slice(params, d.b)), y);
    }

    /// One step for `batch` rows. `hidden` (`batch × hidden_dim`) is updated in
    /// place; `logits` receives `batch × n_actions` and `values` `batch` entries
    /// when the network has the corresponding heads.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch<T: Real>(
        &self,
        params: &[T],
        obs: &[T],
        batch: usize,
        hidden: &mut [T],
        logits: &mut [T],
        values: &mut [T],
        scratch: &mut Scratch<T>,
    ) -> Result<()> {
        self.check_len(params)?;
        let a = &self.arch;
        let expect = |what, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::ShapeMismatch { what, expected, actual })
            }
        };
        expect("observation batch", batch * a.input_dim, obs.len())?;
        expect("hidden batch", batch * a.state_dim(), hidden.len())?;
        expect("logit buffer", batch * a.n_actions, logits.len())?;
        expect("value buffer", if a.with_value_head { batch } else { 0 }, values.len())?;

        let Scratch { a: buf_a, b: buf_b, gi, gh } = scratch;
        for (i, &d) in self.ff.iter().enumerate() {
            let src: &[T] = if i == 0 { obs } else { buf_a };
            self.dense(params, d, src, batch, buf_b);
            buf_b.iter_mut().for_each(|v| *v = v.max(T::zero()));
            std::mem::swap(buf_a, buf_b);
        }
        let mut cur: &[T] = if self.ff.is_empty() { obs } else { buf_a };
        if let Some(g) = self.gru {
            let h = a.hidden_dim;
            self.dense(params, Dense { w: g.w_ih, b: g.b_ih }, cur, batch, gi);
            self.dense(params, Dense { w: g.w_hh, b: g.b_hh }, hidden, batch, gh);
            for r in 0..batch {
                let gi = &gi[r * 3 * h..(r + 1) * 3 * h];
                let gh = &gh[r * 3 * h..(r + 1) * 3 * h];
                let hr = &mut hidden[r * h..(r + 1) * h];
                for j in 0..h {
                    let rg = sigmoid(gi[j] + gh[j]);
                    let zg = sigmoid(gi[h + j] + gh[h + j]);
                    let n = (gi[2 * h + j] + rg * gh[2 * h + j]).tanh();
                    hr[j] = hr[j] + zg * (n - hr[j]);
                }
            }
            cur = hidden;
        }
        if let Some(d) = self.policy {
            let e = &self.layout.entries[d.w];
            linear(cur, batch, self.slice(params, d.w), e.rows, e.cols, Some(self.slice(params, d.b)), logits);
        }
        if let Some(d) = self.value {
            let e = &self.layout.entries[d.w];
            linear(cur, batch, self.slice(params, d.w), 1, e.cols, Some(self.slice(params, d.b)), values);
        }
        Ok(())
    }

    /// Single-observation convenience wrapper around [`Network::forward_batch`].
    pub fn policy_forward(
        &self,
        params: &[f32],
        obs: &[f32],
        hidden: &HiddenState,
    ) -> Result<(Vec<f32>, Option<f32>, HiddenState)> {
        let mut h = hidden.0.clone();
        let mut logits = vec![0.0; self.arch.n_actions];
        let mut values = vec![0.0; usize::from(self.arch.with_value_head)];
        self.forward_batch(params, obs, 1, &mut h, &mut logits, &mut values, &mut Scratch::default())?;
        Ok((logits, values.first().copied(), HiddenState(h)))
    }

    /// Records the forward pass over whole sequences on `tape`.
    ///
    /// Feedforward layers and heads run once over all `steps × batch` rows;
    /// only the recurrence is unrolled per step.
    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<T>, params: &[T], seq: Sequence<'_, T>) -> Result<TapeOutputs> {
        self.check_len(params)?;
        let a = &self.arch;
        let n = seq.steps * seq.batch;
        if seq.obs.len() != n * a.input_dim {
            return Err(Error::ShapeMismatch {
                what: "observation sequence",
                expected: n * a.input_dim,
                actual: seq.obs.len(),
            });
        }
        let param = |tape: &mut Tape<T>, idx: usize| {
            let e = &self.layout.entries[idx];
            tape.param(params, e.offset, e.rows, e.cols)
        };
        let mut cur = tape.input(seq.obs.to_vec(), n, a.input_dim);
        for &d in &self.ff {
            let w = param(tape, d.w);
            let b = param(tape, d.b);
            let y = tape.linear(cur, w, Some(b));
            cur = tape.relu(y);
        }
        let mut final_hidden = None;
        if let Some(g) = self.gru {
            let h = a.hidden_dim;
            let b = seq.batch;
            let w_ih = param(tape, g.w_ih);
            let b_ih = param(tape, g.b_ih);
            let w_hh = param(tape, g.w_hh);
            let b_hh = param(tape, g.b_hh);
            let gi_all = tape.linear(cur, w_ih, Some(b_ih));
            let h0 = match seq.h0 {
                Some(h0) if h0.len() == b * h => h0.to_vec(),
                Some(h0) => {
                    return Err(Error::ShapeMismatch {
                        what: "initial hidden state",
                        expected: b * h,
                        actual: h0.len(),
                    })
                }
                None => vec![T::zero(); b * h],
            };
            let mut hv = tape.input(h0, b, h);
            let mut outs = Vec::with_capacity(seq.steps);
            for t in 0..seq.steps {
                if let Some(resets) = seq.resets {
                    let rows = &resets[t * b..(t + 1) * b];
                    if rows.iter().any(|&r| r) {
                        let mask = rows.iter().map(|&r| if r { T::zero() } else { T::one() }).collect();
                        hv = tape.scale_rows(hv, mask);
                    }
                }
                let gi = tape.slice_rows(gi_all, t * b, (t + 1) * b);
                let gh = tape.linear(hv, w_hh, Some(b_hh));
                let (gi_r, gh_r) = (tape.slice_cols(gi, 0, h), tape.slice_cols(gh, 0, h));
                let (gi_z, gh_z) = (tape.slice_cols(gi, h, 2 * h), tape.slice_cols(gh, h, 2 * h));
                let (gi_n, gh_n) = (tape.slice_cols(gi, 2 * h, 3 * h), tape.slice_cols(gh, 2 * h, 3 * h));
                let pre_r = tape.add(gi_r, gh_r);
                let r = tape.sigmoid(pre_r);
                let pre_z = tape.add(gi_z, gh_z);
                let z = tape.sigmoid(pre_z);
                let rh = tape.mul(r, gh_n);
                let pre_n = tape.add(gi_n, rh);
                let nn = tape.tanh(pre_n);
                let diff = tape.sub(nn, hv);
                let step = tape.mul(z, diff);
                hv = tape.add(hv, step);
                outs.push(hv);
            }
            final_hidden = Some(hv);
            cur = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        }
        let logits = match self.policy {
            Some(d) => {
                let w = param(tape, d.w);
                let b = param(tape, d.b);
                Some(tape.linear(cur, w, Some(b)))
            }
            None => None,
        };
        let values = match self.value {
            Some(d) => {
                let w = param(tape, d.w);
                let b = param(tape, d.b);
                Some(tape.linear(cur, w, Some(b)))
            }
            None => None,
        };
        Ok(TapeOutputs {
            logits,
            values,
            final_hidden,
        })
    }
}

/// Random `n × n` orthogonal matrix (Gram-Schmidt on Gaussian rows).
fn orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut m: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                for k in 0..n {
                    m[i * n + k] -= dot * m[j * n + k];
                }
            }
            let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// Draws an action index from `softmax(logits)`.
pub fn sample_action(logits: &[f32], rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    logits.len() - 1
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Log-probability of `action` under `softmax(logits)`.
pub fn log_prob(logits: &[f32], action: usize) -> f32 {
    let mut out = vec![0.0; logits.len()];
    log_softmax_rows(logits, logits.len(), &mut out);
    out[action]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn small_arch() -> NetArch {
        NetArch {
            input_dim: 3,
            hidden_dim: 4,
            n_feedforward: 1,
            recurrent: true,
            n_actions: 3,
            with_value_head: true,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(small_arch().param_count(), 156);
        let reference = NetArch::new(23, 10);
        // 3 × (128·in + 128) feedforward, GRU 6·128·128 + 6·128, head 10·128 + 10.
        let expected = (128 * 23 + 128) + 2 * (128 * 128 + 128) + (6 * 128 * 128 + 6 * 128) + (10 * 128 + 10);
        assert_eq!(reference.param_count(), expected);
        let net = Network::new(reference).unwrap();
        let mut at = 0;
        for e in &net.layout.entries {
            assert_eq!(e.offset, at);
            assert!(!e.is_empty());
            at += e.len();
        }
        assert_eq!(at, expected);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let net = Network::new(small_arch()).unwrap();
        let a = net.init_params(5);
        assert_eq!(a, net.init_params(5));
        assert_ne!(a, net.init_params(6));
        for e in &net.layout.entries {
            let bound = match e.name.as_str() {
                n if n.ends_with("bias") || n.ends_with("b_ih") || n.ends_with("b_hh") => 0.0,
                "gru.w_hh" => 1.0,
                "policy.weight" => 0.01 / (e.cols as f64).sqrt(),
                _ => 1.0 / (e.cols as f64).sqrt(),
            };
            for &v in &a[e.range()] {
                assert!(v.is_finite() && (v.abs() as f64) <= bound + 1e-7, "{} {v}", e.name);
            }
        }
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let mut rng = rng_from(3);
        let n = 6;
        let q = orthogonal(n, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let net = Network::new(small_arch()).unwrap();
        let p = vec![0.0; net.n_params()];
        let (logits, value, h) = net
            .policy_forward(&p, &[1.0, -2.0, 0.5], &HiddenState::zeros(&net.arch))
            .unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert_eq!(value, Some(0.0));
        assert_eq!(h.0, vec![0.0; 4]);
        let lp = log_prob(&logits, 1);
        assert!((lp.exp() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn closed_update_gate_keeps_hidden_state() {
        let net = Network::new(small_arch()).unwrap();
        let mut p = net.init_params(1);
        let e = net.layout.entries.iter().find(|e| e.name == "gru.b_ih").unwrap().clone();
        // Push the update-gate bias far negative so z saturates at 0.
        for v in &mut p[e.offset + 4..e.offset + 8] {
            *v = -1e4;
        }
        let h0 = HiddenState(vec![0.3, -0.2, 0.9, 0.0]);
        let (_, _, h1) = net.policy_forward(&p, &[1.0, 0.0, 1.0], &h0).unwrap();
        let (_, _, h2) = net.policy_forward(&p, &[0.0, 5.0, -1.0], &h1).unwrap();
        assert_eq!(h1, h0);
        assert_eq!(h2, h0);
    }

    #[test]
    fn forward_is_pure() {
        let net = Network::new(small_arch()).unwrap();
        let p = net.init_params(2);
        let h = HiddenState(vec![0.1; 4]);
        let a = net.policy_forward(&p, &[0.2, 0.4, 0.6], &h).unwrap();
        let b = net.policy_forward(&p, &[0.2, 0.4, 0.6], &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flatten_round_trip_and_length_check() {
        let net = Network::new(small_arch()).unwrap();
        let p = net.init_params(9);
        let t = net.unflatten(&p).unwrap();
        assert_eq!(net.flatten(&t).unwrap(), p);
        assert!(net.unflatten(&p[1..]).is_err());
        let mut bad = t.clone();
        bad[0].data.pop();
        assert!(net.flatten(&bad).is_err());
    }

    #[test]
    fn taped_forward_matches_step_forward() {
        let net = Network::new(small_arch()).unwrap();
        let p = net.init_params(4);
        let mut rng = rng_from(4);
        let (steps, batch) = (5, 2);
        let obs: Vec<f32> = (0..steps * batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let resets: Vec<bool> = (0..steps * batch).map(|i| i == 5).collect();

        let mut tape = Tape::new();
        let out = net
            .forward_tape(
                &mut tape,
                &p,
                Sequence {
                    obs: &obs,
                    steps,
                    batch,
                    h0: None,
                    resets: Some(&resets),
                },
            )
            .unwrap();
        let taped_logits = tape.value(out.logits.unwrap()).to_vec();
        let taped_values = tape.value(out.values.unwrap()).to_vec();

        let mut hidden = vec![0.0f32; batch * 4];
        let mut scratch = Scratch::default();
        for t in 0..steps {
            for b in 0..batch {
                if resets[t * batch + b] {
                    hidden[b * 4..(b + 1) * 4].fill(0.0);
                }
            }
            let mut logits = vec![0.0; batch * 3];
            let mut values = vec![0.0; batch];
            net.forward_batch(
                &p,
                &obs[t * batch * 3..(t + 1) * batch * 3],
                batch,
                &mut hidden,
                &mut logits,
                &mut values,
                &mut scratch,
            )
            .unwrap();
            assert_eq!(&taped_logits[t * batch * 3..(t + 1) * batch * 3], &logits[..]);
            assert_eq!(&taped_values[t * batch..(t + 1) * batch], &values[..]);
        }
    }

    fn net_loss(net: &Network, tape: &mut Tape<f64>, p: &[f64], obs: &[f64], h0: &[f64]) -> Var {
        let resets = [false, false, false, true, false, false, false, false];
        let out = net
            .forward_tape(
                tape,
                p,
                Sequence {
                    obs,
                    steps: 4,
                    batch: 2,
                    h0: Some(h0),
                    resets: Some(&resets),
                },
            )
            .unwrap();
        let ls = tape.log_softmax(out.logits.unwrap());
        let picked = tape.gather(ls, vec![0, 1, 2, 0, 1, 2, 0, 1]);
        let weighted = tape.mul_const(picked, vec![1.0, -0.5, 2.0, 0.3, -1.0, 0.7, 0.1, -2.0]);
        let pg = tape.mean(weighted);
        let v = out.values.unwrap();
        let sq = tape.square(v);
        let vl = tape.mean(sq);
        let total = tape.add(pg, vl);
        let hsum = tape.sum(out.final_hidden.unwrap());
        tape.add(total, hsum)
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let net = Network::new(small_arch()).unwrap();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let mut rng = rng_from(100 + seed);
            let p: Vec<f64> = (0..net.n_params()).map(|_| rng.gen_range(-0.8..0.8)).collect();
            // Redraw inputs until no ReLU input sits within reach of its kink,
            // where central differences are meaningless.
            let obs = loop {
                let obs: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let clear = obs.chunks(3).all(|x| {
                    (0..4).all(|j| {
                        let pre = p[12 + j] + (0..3).map(|k| p[j * 3 + k] * x[k]).sum::<f64>();
                        pre.abs() > 1e-2
                    })
                });
                if clear {
                    break obs;
                }
            };
            let h0: Vec<f64> = (0..2 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let mut tape = Tape::new();
            let loss = net_loss(&net, &mut tape, &p, &obs, &h0);
            let g = tape.backward(loss, p.len()).unwrap();
            for i in 0..p.len() {
                let mut q = p.clone();
                q[i] += 1e-3;
                let mut t = Tape::new();
                let l = net_loss(&net, &mut t, &q, &obs, &h0);
                let up = t.scalar(l);
                q[i] -= 2e-3;
                let mut t = Tape::new();
                let l = net_loss(&net, &mut t, &q, &obs, &h0);
                let fd = (up - t.scalar(l)) / 2e-3;
                let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn sampling_and_argmax() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
        let mut rng = rng_from(0);
        let logits = [0.0, (3.0f32).ln()];
        let n = 40_000;
        let ones = (0..n).filter(|_| sample_action(&logits, &mut rng) == 1).count();
        let p = ones as f64 / n as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75 * 0.25 / n as f64).sqrt());
    }
}
