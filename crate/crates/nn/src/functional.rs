//! Recurrent cells, attention and residual composition built from tape primitives.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::Scalar;

/// Elman cell: `h_t = tanh(x_t W_x + h_prev W_h + b)`.
pub fn rnn_cell(tape: &mut Tape, h_prev: Var, x_t: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
    let xp = tape.affine(x_t, wx, Some(b))?;
    rnn_step(tape, Some(h_prev), xp, wh)
}

/// One recurrence given the already projected input `x_t W_x + b`.
pub fn rnn_step(tape: &mut Tape, h_prev: Option<Var>, x_proj: Var, wh: Var) -> Result<Var> {
    let pre = match h_prev {
        Some(h) => {
            let hh = tape.matmul(h, wh)?;
            tape.add(x_proj, hh)?
        }
        None => x_proj,
    };
    Ok(tape.tanh(pre))
}

/// LSTM cell with gate blocks laid out `[forget, input, candidate, output]`
/// along the last axis of `W_x`, `W_h` and `b`.
pub fn lstm_cell(
    tape: &mut Tape,
    h_prev: Var,
    c_prev: Var,
    x_t: Var,
    wx: Var,
    wh: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let xp = tape.affine(x_t, wx, Some(b))?;
    lstm_step(tape, Some((h_prev, c_prev)), xp, wh)
}

/// One LSTM update given the projected input `x_t W_x + b` of width `4h`.
pub fn lstm_step(
    tape: &mut Tape,
    state: Option<(Var, Var)>,
    x_proj: Var,
    wh: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x_proj).to_vec();
    let width = *shape.last().ok_or_else(|| shape_err("lstm", "scalar projection"))?;
    if width % 4 != 0 {
        return Err(shape_err("lstm", format!("gate width {width} not divisible by 4")));
    }
    let h = width / 4;
    let axis = shape.len() - 1;
    let gates = match state {
        Some((h_prev, _)) => {
            let hh = tape.matmul(h_prev, wh)?;
            tape.add(x_proj, hh)?
        }
        None => x_proj,
    };
    let f_pre = tape.narrow(gates, axis, 0, h)?;
    let i_pre = tape.narrow(gates, axis, h, h)?;
    let c_pre = tape.narrow(gates, axis, 2 * h, h)?;
    let o_pre = tape.narrow(gates, axis, 3 * h, h)?;
    let f = tape.sigmoid(f_pre);
    let i = tape.sigmoid(i_pre);
    let c_tilde = tape.tanh(c_pre);
    let o = tape.sigmoid(o_pre);
    let ic = tape.mul(i, c_tilde)?;
    let c = match state {
        Some((_, c_prev)) => {
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ic)?
        }
        None => ic,
    };
    let tc = tape.tanh(c);
    let h_t = tape.mul(o, tc)?;
    Ok((h_t, c))
}

/// Projections used by [`scaled_dot_attention`].
#[derive(Debug, Clone, Copy)]
pub struct QkvWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V` over `[B, n, d]` (or `[n, d]`).
///
/// Returns the attended values and the attention weights `[B, n, n]`.
pub fn scaled_dot_attention(tape: &mut Tape, x: Var, w: &QkvWeights) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let x3 = match shape.len() {
        2 => tape.reshape(x, &[1, shape[0], shape[1]])?,
        3 => x,
        _ => return Err(shape_err("attention", format!("{shape:?}"))),
    };
    let q = tape.affine(x3, w.wq, Some(w.bq))?;
    let k = tape.affine(x3, w.wk, Some(w.bk))?;
    let v = tape.affine(x3, w.wv, Some(w.bv))?;
    let dk = *tape.shape(k).last().unwrap();
    if dk == 0 {
        return Err(shape_err("attention", "key width is zero"));
    }
    let scores = tape.bmm(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (dk as Scalar).sqrt());
    let weights = tape.softmax(scaled)?;
    let out = tape.bmm(weights, v, false)?;
    let out = if shape.len() == 2 {
        let s = tape.shape(out).to_vec();
        tape.reshape(out, &s[1..])?
    } else {
        out
    };
    Ok((out, weights))
}

/// `y = x + f(x)`.
pub fn residual_add(tape: &mut Tape, x: Var, fx: Var) -> Result<Var> {
    tape.add(x, fx)
}
