//! Finite-difference verification of tape gradients.
//!
//! Both checkers take the forward pass as a closure and run it repeatedly:
//! once on a fresh tape to collect analytic gradients via backward, then
//! twice per input element with that element displaced by ±eps to form a
//! central difference. The forward closure is the single source of truth,
//! so the check is independent of the backward implementation.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One gradient element whose analytic and numeric values disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-3)
}

fn scalar_forward(tape: &mut Tape, forward_out: Result<Var>) -> Result<(Var, f64)> {
    let out = forward_out?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((out, tape.item(out)))
}

/// Checks `forward`'s gradients with respect to explicit tensor inputs.
///
/// `forward` receives the inputs as differentiable leaves and must return a
/// scalar. Every element of every input is perturbed. Returns the list of
/// mismatches exceeding `tol`; empty means the check passed.
pub fn check_fn_gradients(
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    forward: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Vec<GradMismatch>> {
    let build = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var, f64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf_grad(t.clone())).collect();
        let out = forward(&mut tape, &vars);
        let (out, val) = scalar_forward(&mut tape, out)?;
        Ok((tape, vars, out, val))
    };

    let (mut tape, vars, out, _) = build(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut mismatches = Vec::new();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += eps;
            let (_, _, _, f_plus) = build(&plus)?;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= eps;
            let (_, _, _, f_minus) = build(&minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[ti][e];
            let err = rel_err(a, numeric);
            if err > tol {
                mismatches.push(GradMismatch {
                    input: format!("input{ti}"),
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(mismatches)
}

/// Checks `forward`'s gradients with respect to store parameters.
///
/// `forward` must lease whatever parameters it uses from the store it is
/// handed and return a scalar loss. Every element of every parameter in
/// `ids` is perturbed in place and restored. Gradients of parameters the
/// forward pass never touches are required to be zero.
pub fn check_param_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    tol: f64,
    forward: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<Vec<GradMismatch>> {
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, store);
        let (_, val) = scalar_forward(&mut tape, out)?;
        Ok(val)
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let out = forward(&mut tape, store);
    let (out, _) = scalar_forward(&mut tape, out)?;
    tape.backward(out)?;
    tape.write_grads(store)?;
    let analytic: Vec<(ParamId, Vec<f64>)> =
        ids.iter().map(|&id| (id, store.grad(id).to_vec())).collect();

    let mut mismatches = Vec::new();
    for (id, grad) in &analytic {
        for e in 0..grad.len() {
            let orig = store.value(*id).data()[e];
            store.value_mut(*id).data_mut()[e] = orig + eps;
            let f_plus = eval(store)?;
            store.value_mut(*id).data_mut()[e] = orig - eps;
            let f_minus = eval(store)?;
            store.value_mut(*id).data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = grad[e];
            let err = rel_err(a, numeric);
            if err > tol {
                mismatches.push(GradMismatch {
                    input: store.name(*id).to_string(),
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(mismatches)
}

/// Panics with a readable report if any mismatch is present.
pub fn assert_grads_match(mismatches: &[GradMismatch]) {
    if mismatches.is_empty() {
        return;
    }
    let mut report = format!("{} gradient mismatches:\n", mismatches.len());
    for m in mismatches.iter().take(10) {
        report.push_str(&format!(
            "  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e})\n",
            m.input, m.element, m.analytic, m.numeric, m.rel_err
        ));
    }
    panic!("{report}");
}
