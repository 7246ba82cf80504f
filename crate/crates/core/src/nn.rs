//! Composite building blocks assembled from tape primitives.

use crate::error::Result;
use crate::tape::{Tape, Var};

/// `x · W (+ b)` for a vector `x` of shape `[K]`, `W` of `[K×N]`.
pub fn affine_vec(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.vecmat(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// `X · W (+ b per row)` for `X` of shape `[R×K]`, `W` of `[K×N]`.
pub fn affine_rows(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let rows = tape.shape(y)[0];
            let bb = broadcast_rows(tape, b, rows)?;
            tape.add(y, bb)
        }
        None => Ok(y),
    }
}

/// Repeats a vector as the rows of a matrix; gradients accumulate back
/// into the single source vector.
pub fn broadcast_rows(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    tape.stack_rows(&vec![v; rows])
}

/// One LSTM step.
///
/// Gate order inside the stacked weights is input, forget, cell, output.
/// `x` is `[I]`, `h` and `c` are `[H]`, `w_ih` is `[I×4H]`, `w_hh` is
/// `[H×4H]`, `b` is `[4H]`. Returns the next `(h, c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[0];
    let from_x = tape.vecmat(x, w_ih)?;
    let from_h = tape.vecmat(h, w_hh)?;
    let pre = tape.add(from_x, from_h)?;
    let gates = tape.add(pre, b)?;
    let stacked = tape.reshape(gates, &[4, hidden])?;
    let i_raw = tape.row(stacked, 0)?;
    let f_raw = tape.row(stacked, 1)?;
    let g_raw = tape.row(stacked, 2)?;
    let o_raw = tape.row(stacked, 3)?;
    let i = tape.sigmoid(i_raw)?;
    let f = tape.sigmoid(f_raw)?;
    let g = tape.tanh(g_raw)?;
    let o = tape.sigmoid(o_raw)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, check_fn_gradients};
    use crate::tensor::Tensor;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn affine_matches_hand_math() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let w = tape.leaf(Tensor::matrix(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap());
        let b = tape.leaf(Tensor::vector(&[0.5, 0.5, 0.5]));
        let y = affine_vec(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[1.5, 2.5, 0.5]);
    }

    #[test]
    fn broadcast_bias_accumulates_row_grads() {
        let mut tape = Tape::new();
        let b = tape.leaf_grad(Tensor::vector(&[0.0, 0.0]));
        let m = broadcast_rows(&mut tape, b, 3).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b), &[3.0, 3.0]);
    }

    #[test]
    fn lstm_matches_hand_unrolled_cell() {
        // Scalar-sized cell (I = H = 1) checked against direct arithmetic.
        let (x, h0, c0) = (0.5, -0.3, 0.2);
        let (wi, wf, wg, wo) = (0.1, 0.2, 0.3, 0.4);
        let (ui, uf, ug, uo) = (-0.5, 0.6, -0.7, 0.8);
        let (bi, bf, bg, bo) = (0.01, 0.02, 0.03, 0.04);

        let i = sigmoid(x * wi + h0 * ui + bi);
        let f = sigmoid(x * wf + h0 * uf + bf);
        let g = (x * wg + h0 * ug + bg).tanh();
        let o = sigmoid(x * wo + h0 * uo + bo);
        let c1 = f * c0 + i * g;
        let h1 = o * c1.tanh();

        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::vector(&[x]));
        let hv = tape.leaf(Tensor::vector(&[h0]));
        let cv = tape.leaf(Tensor::vector(&[c0]));
        let w_ih = tape.leaf(Tensor::matrix(&[vec![wi, wf, wg, wo]]).unwrap());
        let w_hh = tape.leaf(Tensor::matrix(&[vec![ui, uf, ug, uo]]).unwrap());
        let b = tape.leaf(Tensor::vector(&[bi, bf, bg, bo]));
        let (h_next, c_next) = lstm_cell(&mut tape, xv, hv, cv, w_ih, w_hh, b).unwrap();

        assert!((tape.value(h_next)[0] - h1).abs() < 1e-12);
        assert!((tape.value(c_next)[0] - c1).abs() < 1e-12);
    }

    #[test]
    fn fd_lstm_cell() {
        let x = Tensor::vector(&[0.4, -0.8, 0.2]);
        let h = Tensor::vector(&[0.1, -0.2]);
        let c = Tensor::vector(&[0.3, 0.5]);
        let mut w_ih = Tensor::zeros(&[3, 8]);
        for (i, v) in w_ih.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 0.7).sin() * 0.5;
        }
        let mut w_hh = Tensor::zeros(&[2, 8]);
        for (i, v) in w_hh.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 0.3).cos() * 0.5;
        }
        let b = Tensor::vector(&[0.1, -0.1, 0.2, -0.2, 0.3, -0.3, 0.4, -0.4]);
        let mismatches = check_fn_gradients(
            &[x, h, c, w_ih, w_hh, b],
            1e-5,
            1e-4,
            |tape, v| {
                let (h1, c1) = lstm_cell(tape, v[0], v[1], v[2], v[3], v[4], v[5])?;
                let (h2, _) = lstm_cell(tape, v[0], h1, c1, v[3], v[4], v[5])?;
                let sq = tape.mul(h2, h2)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert_grads_match(&mismatches);
    }

    #[test]
    fn fd_affine_rows() {
        let x = Tensor::matrix(&[vec![0.2, -0.9], vec![1.1, 0.4], vec![-0.3, 0.8]]).unwrap();
        let w = Tensor::matrix(&[vec![0.5, -0.2, 0.7], vec![0.1, 0.9, -0.4]]).unwrap();
        let b = Tensor::vector(&[0.3, -0.6, 0.2]);
        let mismatches = check_fn_gradients(&[x, w, b], 1e-5, 1e-4, |tape, v| {
            let y = affine_rows(tape, v[0], v[1], Some(v[2]))?;
            let act = tape.tanh(y)?;
            let sq = tape.mul(act, act)?;
            tape.sum(sq)
        })
        .unwrap();
        assert_grads_match(&mismatches);
    }
}
