//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Relative error between an analytic and a numeric derivative:
/// |a - n| / max(1e-8, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare supplied analytic gradients against central finite differences of
/// `loss_fn` with the given step. Returns the max relative error over all
/// parameter components. Errors if the loss is non-finite at a probe point.
pub fn grad_check_against<F>(
    mut loss_fn: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for p in 0..params.len() {
        assert_eq!(analytic[p].len(), params[p].numel());
        for j in 0..params[p].numel() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + step;
            let plus = loss_fn(&work)?;
            work[p].data_mut()[j] = orig - step;
            let minus = loss_fn(&work)?;
            work[p].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at finite-difference probe of parameter {p}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[p][j], numeric));
        }
    }
    Ok(max_err)
}

/// Full check for a loss expressed on a tape: `build` receives one leaf per
/// parameter (grad-enabled regardless of the tensors' own flags) and must
/// return a scalar. The analytic side comes from one backward pass; the
/// numeric side re-evaluates the same construction at perturbed parameters,
/// so the two routes share no gradient code.
pub fn grad_check<B>(build: B, params: &[Tensor], step: f64) -> Result<f64>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| tape.leaf(&p.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
    };
    grad_check_against(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
            let loss = build(&mut tape, &vars)?;
            Ok(tape.value(loss)[0])
        },
        params,
        &analytic,
        step,
    )
}
