//! Single LSTM cell step built from tape primitives.
//!
//! Gate pre-activations are `W_x·x + W_h·h + b`, laid out as four blocks of
//! `hidden` rows in the order input, forget, output, candidate.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// Records one step on `tape`; returns `(h', c')`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, p: LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.value(h).len();
    if tape.value(c).len() != hidden {
        return Err(Error::shape("lstm_step", "hidden and cell state lengths differ"));
    }
    let wx_shape = tape.value(p.w_x).shape();
    if wx_shape.len() != 2 || wx_shape[0] != 4 * hidden {
        return Err(Error::shape("lstm_step", format!("input weights {wx_shape:?} do not have {} rows", 4 * hidden)));
    }
    let gx = tape.linear(x, p.w_x, Some(p.bias))?;
    let gh = tape.linear(h, p.w_h, None)?;
    let gates = tape.add(gx, gh)?;
    let i_pre = tape.slice(gates, 0, hidden)?;
    let f_pre = tape.slice(gates, hidden, hidden)?;
    let o_pre = tape.slice(gates, 2 * hidden, hidden)?;
    let g_pre = tape.slice(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let g = tape.tanh(g_pre)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// Tensor-level convenience wrapper around [`lstm_step`].
pub fn lstm_step_values(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w_x: &Tensor,
    w_h: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h.clone());
    let cv = tape.constant(c.clone());
    let p = LstmVars { w_x: tape.constant(w_x.clone()), w_h: tape.constant(w_h.clone()), bias: tape.constant(bias.clone()) };
    let (h2, c2) = lstm_step(&mut tape, xv, hv, cv, p)?;
    Ok((tape.value(h2).clone(), tape.value(c2).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_state() {
        let (d, hd) = (3, 2);
        let (h, c) = lstm_step_values(
            &Tensor::vector(&[0.5, -1.0, 2.0]),
            &Tensor::zeros(&[hd]),
            &Tensor::zeros(&[hd]),
            &Tensor::zeros(&[4 * hd, d]),
            &Tensor::zeros(&[4 * hd, hd]),
            &Tensor::zeros(&[4 * hd]),
        )
        .unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut bias = Tensor::zeros(&[4]);
        bias.data_mut()[1] = 1000.0;
        let (_, c) = lstm_step_values(
            &Tensor::vector(&[0.7]),
            &Tensor::zeros(&[1]),
            &Tensor::vector(&[2.0]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[4, 1]),
            &bias,
        )
        .unwrap();
        assert_eq!(c.data(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let r = lstm_step_values(
            &Tensor::vector(&[0.7]),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[4]),
        );
        assert!(r.is_err());
    }
}
