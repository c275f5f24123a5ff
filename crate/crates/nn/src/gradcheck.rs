//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::Result;
use crate::layers::Forward;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: Scalar,
    pub tolerance: Scalar,
    /// Error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: Scalar,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_per_param: Option<usize>,
    /// Run the loss closure in training mode.
    pub train: bool,
    /// Combine central differences at `step` and `step / 2` to cancel the
    /// second-order truncation term.
    pub richardson: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: if cfg!(feature = "f64") { 1e-5 } else { 1e-3 },
            tolerance: if cfg!(feature = "f64") { 1e-6 } else { 1e-3 },
            floor: 1.0,
            max_per_param: None,
            train: true,
            richardson: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: Scalar,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: Scalar,
    pub passed: bool,
}

/// Reverse-mode gradients of the loss for every parameter in `store`.
pub fn analytic_gradients<F>(store: &ParamStore, train: bool, loss_fn: &mut F) -> Result<Vec<Vec<Scalar>>>
where
    F: FnMut(&mut Forward<'_>) -> Result<Var>,
{
    let mut scratch = store.clone();
    scratch.zero_grads();
    let mut fwd = Forward::new(store, train);
    let loss = loss_fn(&mut fwd)?;
    let grads = fwd.tape.backward(loss)?;
    let (tape, _) = fwd.finish();
    tape.accumulate_param_grads(&grads, &mut scratch);
    Ok(scratch.params().iter().map(|p| p.grad.data().to_vec()).collect())
}

fn eval_loss<F>(store: &ParamStore, train: bool, loss_fn: &mut F) -> Result<Scalar>
where
    F: FnMut(&mut Forward<'_>) -> Result<Var>,
{
    let mut fwd = Forward::new(store, train);
    let loss = loss_fn(&mut fwd)?;
    Ok(fwd.tape.value(loss).item())
}

/// Compares supplied analytic gradients against central differences.
pub fn compare_with_numeric<F>(
    store: &ParamStore,
    analytic: &[Vec<Scalar>],
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_>) -> Result<Var>,
{
    let mut rng = index_rng(opts.seed);
    let mut probe = store.clone();
    let mut max_err: Scalar = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        let numel = grads.len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in indices {
            let mut central = |h: Scalar| -> Result<Scalar> {
                let original = probe.params()[pi].value.data()[idx];
                probe.params_mut()[pi].value.data_mut()[idx] = original + h;
                let plus = eval_loss(&probe, opts.train, &mut loss_fn)?;
                probe.params_mut()[pi].value.data_mut()[idx] = original - h;
                let minus = eval_loss(&probe, opts.train, &mut loss_fn)?;
                probe.params_mut()[pi].value.data_mut()[idx] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                let coarse = central(opts.step)?;
                let fine = central(opts.step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                central(opts.step)?
            };
            let a = grads[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            checked += 1;
            if !(err <= max_err) {
                max_err = err;
                worst = Some((store.params()[pi].name.clone(), idx));
            }
        }
    }
    let passed = max_err.is_finite() && max_err < opts.tolerance;
    Ok(GradCheckReport { max_rel_error: max_err, worst, checked, tolerance: opts.tolerance, passed })
}

/// Full check: analytic gradients of `loss_fn` versus central differences.
pub fn grad_check<F>(store: &ParamStore, opts: &GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, opts.train, &mut loss_fn)?;
    compare_with_numeric(store, &analytic, opts, loss_fn)
}

fn index_rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}
