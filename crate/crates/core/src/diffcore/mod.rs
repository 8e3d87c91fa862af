//! Minimal reverse-mode differentiation for the fixed graphs used by coupling
//! flows, plus a central-difference checker.

mod matrix;
mod mlp;
mod param;
mod tape;

pub use matrix::Matrix;
pub use mlp::{mlp_forward, mlp_tape, MlpSpec, ParamSource};
pub(crate) use mlp::mlp_forward_into;
pub use param::{ParamSlot, ParamVector};
pub use tape::{log_sum_exp, Tape, Var, LOG_FLOOR};

use crate::error::{Error, Result};

/// A scalar-valued graph over a parameter vector.
///
/// Implemented for closures `Fn(&mut Tape) -> Result<Var>`.
pub trait LossProgram {
    fn build(&self, tape: &mut Tape<'_>) -> Result<Var>;
}

impl<F> LossProgram for F
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape<'_>) -> Result<Var> {
        self(tape)
    }
}

/// Loss value and its gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Forward value only.
pub fn evaluate<P: LossProgram + ?Sized>(program: &P, params: &[f64]) -> Result<f64> {
    let mut tape = Tape::new(params);
    let out = program.build(&mut tape)?;
    tape.scalar(out)
}

/// Loss and gradient by reverse accumulation.
pub fn grad_scalar<P: LossProgram + ?Sized>(program: &P, params: &[f64]) -> Result<GradResult> {
    let mut tape = Tape::new(params);
    let out = program.build(&mut tape)?;
    let loss = tape.scalar(out)?;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow { primitive: "loss" });
    }
    let gradient = tape.backward(out)?;
    Ok(GradResult { loss, gradient })
}

/// Central-difference gradient, one coordinate at a time.
pub fn central_difference<P: LossProgram + ?Sized>(
    program: &P,
    params: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + epsilon;
        let plus = evaluate(program, &work)?;
        work[i] = orig - epsilon;
        let minus = evaluate(program, &work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss with coordinate {i} perturbed"
            )));
        }
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − central| / max(1e-8, |central|)`.
pub fn finite_diff_check<P: LossProgram + ?Sized>(
    program: &P,
    params: &[f64],
    epsilon: f64,
) -> Result<f64> {
    let numeric = central_difference(program, params, epsilon)?;
    let analytic = grad_scalar(program, params)?.gradient;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, c)| (a - c).abs() / c.abs().max(1e-8))
        .fold(0.0, f64::max))
}
