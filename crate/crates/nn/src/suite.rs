//! Finite-difference checks of every differentiable tape primitive and
//! composite layer on small random inputs.
//!
//! Every operand is registered as a parameter, so gradients are checked for
//! all inputs, not only weights. Losses are `sum(y * r)` for a fixed random
//! `r`, which gives every output entry a distinct weight.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::functional::{residual_add, scaled_dot_attention, QkvWeights};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::layers::{Forward, Lstm, Rnn};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{BnMode, Conv2dSpec, Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Pass threshold on the maximum relative error: 1e-3 on `f32`, 1e-6 on `f64`.
pub const SUITE_TOLERANCE: Scalar = if cfg!(feature = "f64") { 1e-6 } else { 1e-3 };

/// Options used by [`primitive_suite`].
pub fn suite_options(seed: u64) -> GradCheckOptions {
    let mut o = GradCheckOptions { tolerance: SUITE_TOLERANCE, seed, ..GradCheckOptions::default() };
    if !cfg!(feature = "f64") {
        // a wide extrapolated step keeps cancellation error below 1e-4 in f32
        o.step = 2e-2;
        o.richardson = true;
    }
    o
}

struct Case {
    store: ParamStore,
    ids: Vec<ParamId>,
    rng: StdRng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), ids: Vec::new(), rng: StdRng::seed_from_u64(seed) }
    }

    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    fn operand(&mut self, t: Tensor) -> &mut Self {
        let name = format!("x{}", self.ids.len());
        let id = self.store.add(name, t.shape(), Init::Constant { value: 0.0 }, &mut self.rng);
        self.store.param_mut(id).value = t;
        self.ids.push(id);
        self
    }

    fn random(&mut self, shape: &[usize]) -> &mut Self {
        let t = self.uniform(shape);
        self.operand(t)
    }

    /// Entries at least 0.1 away from zero, clear of the ReLU kink.
    fn off_zero(&mut self, shape: &[usize]) -> &mut Self {
        let mut t = self.uniform(shape);
        for v in t.data_mut() {
            *v = v.signum() * (0.1 + v.abs());
        }
        self.operand(t)
    }

    fn check<F>(mut self, opts: &GradCheckOptions, mut op: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        let ids = self.ids.clone();
        let mut weights: Option<Tensor> = None;
        let rng = &mut self.rng;
        grad_check(&self.store, opts, |f: &mut Forward| {
            let vars: Vec<Var> = ids.iter().map(|&id| f.param(id)).collect();
            let y = op(&mut f.tape, &vars)?;
            let shape = f.tape.shape(y).to_vec();
            let r = weights
                .get_or_insert_with(|| {
                    let n = shape.iter().product();
                    Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
                })
                .clone();
            let r = f.tape.input(r);
            let p = f.tape.mul(y, r)?;
            Ok(f.tape.sum(p))
        })
    }
}

/// Runs every check and returns `(name, report)` pairs in a fixed order.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let o = suite_options(seed);
    let mut out = Vec::new();
    let mut s = seed;
    let mut case = || {
        s = s.wrapping_add(1);
        Case::new(s)
    };

    let mut c = case();
    c.random(&[2, 3, 4]).random(&[4, 5]).random(&[5]);
    out.push(("affine", c.check(&o, |t, v| t.affine(v[0], v[1], Some(v[2])))?));

    let mut c = case();
    c.random(&[3, 4]).random(&[4, 2]);
    out.push(("matmul", c.check(&o, |t, v| t.matmul(v[0], v[1]))?));

    let mut c = case();
    c.random(&[2, 3, 4]).random(&[2, 4, 5]);
    out.push(("bmm", c.check(&o, |t, v| t.bmm(v[0], v[1], false))?));

    let mut c = case();
    c.random(&[2, 3, 4]).random(&[2, 5, 4]);
    out.push(("bmm transposed", c.check(&o, |t, v| t.bmm(v[0], v[1], true))?));

    let mut c = case();
    c.random(&[3, 4]).random(&[3, 4]);
    out.push(("add", c.check(&o, |t, v| t.add(v[0], v[1]))?));

    let mut c = case();
    c.random(&[3, 4]).random(&[3, 4]);
    out.push(("mul", c.check(&o, |t, v| t.mul(v[0], v[1]))?));

    let mut c = case();
    c.random(&[3, 4]);
    out.push(("scale", c.check(&o, |t, v| Ok(t.scale(v[0], -1.7)))?));

    let mut c = case();
    c.random(&[3, 4]);
    out.push(("sigmoid", c.check(&o, |t, v| Ok(t.sigmoid(v[0])))?));

    let mut c = case();
    c.random(&[3, 4]);
    out.push(("tanh", c.check(&o, |t, v| Ok(t.tanh(v[0])))?));

    let mut c = case();
    c.off_zero(&[3, 4]);
    out.push(("relu", c.check(&o, |t, v| Ok(t.relu(v[0])))?));

    let mut c = case();
    c.random(&[2, 3, 5]);
    out.push(("softmax", c.check(&o, |t, v| t.softmax(v[0]))?));

    let mut c = case();
    c.random(&[2, 6, 3]);
    out.push(("narrow", c.check(&o, |t, v| t.narrow(v[0], 1, 2, 3))?));

    let mut c = case();
    c.random(&[2, 2, 3]).random(&[2, 4, 3]);
    out.push(("concat", c.check(&o, |t, v| t.concat(&[v[0], v[1]], 1))?));

    let mut c = case();
    c.random(&[2, 6]);
    out.push((
        "reshape",
        c.check(&o, |t, v| {
            // a non-uniform op after the reshape makes the layout matter
            let r = t.reshape(v[0], &[3, 4])?;
            Ok(t.tanh(r))
        })?,
    ));

    let mut c = case();
    c.random(&[2, 3, 4]);
    out.push(("transpose", c.check(&o, |t, v| t.transpose_last2(v[0]))?));

    let mut c = case();
    c.random(&[2, 3, 4]);
    out.push(("mean", c.check(&o, |t, v| t.mean_axis(v[0], 1))?));

    let mut c = case();
    c.random(&[3, 4]);
    out.push((
        "sum",
        c.check(&o, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })?,
    ));

    let mut c = case();
    c.random(&[2, 2, 5, 5]).random(&[3, 2, 3, 3]).random(&[3]);
    out.push((
        "conv2d",
        c.check(&o, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 1, padding: 1 }))?,
    ));

    let mut c = case();
    // distinct values spaced wider than twice the step
    let perm: Vec<Scalar> = (0..72).map(|v| ((v * 11) % 72) as Scalar * 0.05).collect();
    c.operand(Tensor::new(&[2, 1, 6, 6], perm).expect("shape"));
    out.push(("maxpool2d", c.check(&o, |t, v| t.maxpool2d(v[0], 2))?));

    let mut c = case();
    c.random(&[4, 3, 2, 2]).random(&[3]).random(&[3]);
    out.push((
        "batchnorm (batch statistics)",
        c.check(&o, |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0))?,
    ));

    let mut c = case();
    c.random(&[4, 3, 2, 2]).random(&[3]).random(&[3]);
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    out.push((
        "batchnorm (running statistics)",
        c.check(&o, |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0))?,
    ));

    let mut c = case();
    c.random(&[3, 7]);
    out.push((
        "cross entropy",
        c.check(&o, |t, v| {
            let l = t.cross_entropy(v[0], &[0, 5, 6])?;
            // scalar loss; give it shape [1] for the weighting step
            t.reshape(l, &[1])
        })?,
    ));

    let mut c = case();
    c.random(&[2, 4, 3]);
    let rnn = Rnn::new(&mut c.store, "rnn", 3, 4, &mut c.rng);
    out.push(("rnn", check_layer(c, &o, |f, x| rnn.forward(f, x))?));

    let mut c = case();
    c.random(&[2, 4, 3]);
    let lstm = Lstm::new(&mut c.store, "lstm", 3, 4, &mut c.rng);
    out.push(("lstm", check_layer(c, &o, |f, x| lstm.forward(f, x))?));

    let mut c = case();
    c.random(&[2, 3, 4]);
    for _ in 0..3 {
        c.random(&[4, 4]).random(&[4]);
    }
    out.push((
        "residual attention",
        c.check(&o, |t, v| {
            let w = QkvWeights { wq: v[1], bq: v[2], wk: v[3], bk: v[4], wv: v[5], bv: v[6] };
            let (att, _) = scaled_dot_attention(t, v[0], &w)?;
            residual_add(t, v[0], att)
        })?,
    ));

    Ok(out)
}

/// Checks a layer whose own parameters live in the same store as the input.
fn check_layer<F>(mut c: Case, opts: &GradCheckOptions, mut layer: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_>, Var) -> Result<Var>,
{
    let input = c.ids[0];
    let mut weights: Option<Tensor> = None;
    let rng = &mut c.rng;
    grad_check(&c.store, opts, |f: &mut Forward| {
        let x = f.param(input);
        let y = layer(f, x)?;
        let shape = f.tape.shape(y).to_vec();
        let r = weights
            .get_or_insert_with(|| {
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
            })
            .clone();
        let r = f.tape.input(r);
        let p = f.tape.mul(y, r)?;
        Ok(f.tape.sum(p))
    })
}
