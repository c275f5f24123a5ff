//! Parameterized layers. Each layer only holds ids into a [`ParamStore`];
//! a [`Forward`] pass records their parameters on a fresh [`Tape`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::functional::{lstm_step, rnn_step, scaled_dot_attention, QkvWeights};
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::tape::{BatchStats, BnMode, Conv2dSpec, Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: Scalar,
    pub stats: BatchStats,
}

/// One forward pass: a tape plus read access to the parameters.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    train: bool,
    cache: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Self { tape: Tape::new(), store, train, cache: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Tape variable for a parameter, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.cache.insert(id, v);
        v
    }

    pub fn finish(self) -> (Tape, Vec<BnUpdate>) {
        (self.tape, self.bn_updates)
    }
}

/// Applies running-statistics updates: `r = (1 - m) r + m batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

fn fan_in_bound(fan_in: usize) -> Scalar {
    // Kaiming-uniform with negative slope sqrt(5), i.e. 1/sqrt(fan_in).
    1.0 / (fan_in.max(1) as Scalar).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(in_dim);
        let w = store.add(format!("{name}.weight"), &[in_dim, out_dim], Init::Uniform { bound }, rng);
        let b = store.add(format!("{name}.bias"), &[out_dim], Init::Uniform { bound }, rng);
        Self { w, b, in_dim, out_dim }
    }

    /// Weight and bias start at zero, so the layer initially outputs zeros.
    pub fn zeroed<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let zero = Init::Constant { value: 0.0 };
        let w = store.add(format!("{name}.weight"), &[in_dim, out_dim], zero, rng);
        let b = store.add(format!("{name}.bias"), &[out_dim], zero, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.w), f.param(self.b));
        f.tape.affine(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(in_ch * kernel * kernel);
        let w = store.add(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::Uniform { bound }, rng);
        let b = store.add(format!("{name}.bias"), &[out_ch], Init::Uniform { bound }, rng);
        Self { w, b, spec }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.w), f.param(self.b));
        f.tape.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: Scalar,
}

impl BatchNorm2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[channels], Init::Constant { value: 1.0 }, rng);
        let beta = store.add(format!("{name}.beta"), &[channels], Init::Constant { value: 0.0 }, rng);
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
        Self { gamma, beta, running_mean, running_var, momentum: 0.1 }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        if f.train {
            let (y, stats) = f.tape.batchnorm(x, g, b, BnMode::Train)?;
            if let Some(stats) = stats {
                f.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
            }
            Ok(y)
        } else {
            let store = f.store;
            let mode = BnMode::Eval {
                mean: store.buffer(self.running_mean).data(),
                var: store.buffer(self.running_var).data(),
            };
            Ok(f.tape.batchnorm(x, g, b, mode)?.0)
        }
    }
}

fn check_seq(tape: &Tape, x: Var, in_dim: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != in_dim {
        return Err(shape_err(op, format!("input {s:?}, want [B, n, {in_dim}]")));
    }
    Ok((s[0], s[1]))
}

/// Single-layer Elman RNN returning the full hidden sequence `[B, n, h]`.
#[derive(Debug, Clone)]
pub struct Rnn {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Rnn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(hidden);
        let init = Init::Uniform { bound };
        let wx = store.add(format!("{name}.w_x"), &[in_dim, hidden], init, rng);
        let wh = store.add(format!("{name}.w_h"), &[hidden, hidden], init, rng);
        let b = store.add(format!("{name}.bias"), &[hidden], init, rng);
        Self { wx, wh, b, in_dim, hidden }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (batch, steps) = check_seq(&f.tape, x, self.in_dim, "rnn")?;
        let (wx, wh, b) = (f.param(self.wx), f.param(self.wh), f.param(self.b));
        let tape = &mut f.tape;
        let xp = tape.affine(x, wx, Some(b))?;
        let mut h = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.narrow(xp, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, self.hidden])?;
            let ht = rnn_step(tape, h, xt, wh)?;
            outs.push(tape.reshape(ht, &[batch, 1, self.hidden])?);
            h = Some(ht);
        }
        tape.concat(&outs, 1)
    }
}

/// Single-layer LSTM returning the full hidden sequence `[B, n, h]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(hidden);
        let init = Init::Uniform { bound };
        let wx = store.add(format!("{name}.w_x"), &[in_dim, 4 * hidden], init, rng);
        let wh = store.add(format!("{name}.w_h"), &[hidden, 4 * hidden], init, rng);
        let b = store.add(format!("{name}.bias"), &[4 * hidden], init, rng);
        // forget-gate bias starts at +1
        store.param_mut(b).value.data_mut()[..hidden].fill(1.0);
        Self { wx, wh, b, in_dim, hidden }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (batch, steps) = check_seq(&f.tape, x, self.in_dim, "lstm")?;
        let (wx, wh, b) = (f.param(self.wx), f.param(self.wh), f.param(self.b));
        let tape = &mut f.tape;
        let xp = tape.affine(x, wx, Some(b))?;
        let mut state = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.narrow(xp, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, 4 * self.hidden])?;
            let (h, c) = lstm_step(tape, state, xt, wh)?;
            outs.push(tape.reshape(h, &[batch, 1, self.hidden])?);
            state = Some((h, c));
        }
        tape.concat(&outs, 1)
    }
}

/// Residual self-attention: `y = x + softmax(Q K^T / sqrt(d)) V`.
#[derive(Debug, Clone)]
pub struct ResidualAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
}

impl ResidualAttention {
    /// With `zero_value`, the value projection starts at zero and the block is
    /// an exact identity until trained.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, zero_value: bool, rng: &mut R) -> Self {
        let q = Linear::new(store, &format!("{name}.query"), dim, dim, rng);
        let k = Linear::new(store, &format!("{name}.key"), dim, dim, rng);
        let v = if zero_value {
            Linear::zeroed(store, &format!("{name}.value"), dim, dim, rng)
        } else {
            Linear::new(store, &format!("{name}.value"), dim, dim, rng)
        };
        Self { q, k, v, dim }
    }

    /// Returns the block output and the attention weights.
    pub fn forward_with_weights(&self, f: &mut Forward<'_>, x: Var) -> Result<(Var, Var)> {
        let w = QkvWeights {
            wq: f.param(self.q.w),
            bq: f.param(self.q.b),
            wk: f.param(self.k.w),
            bk: f.param(self.k.b),
            wv: f.param(self.v.w),
            bv: f.param(self.v.b),
        };
        let (att, weights) = scaled_dot_attention(&mut f.tape, x, &w)?;
        Ok((f.tape.add(x, att)?, weights))
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(f, x)?.0)
    }
}
