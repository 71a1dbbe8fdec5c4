use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that exact zeros compare by
/// absolute difference instead of dividing finite-difference noise by zero.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub numel: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference step for a coordinate currently at `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Compares reverse-mode gradients of a scalar `function` against central
/// finite differences, one parameter block at a time.
///
/// `function` receives a fresh tape and the parameter variables in the same
/// order as `parameters`, and must be deterministic.
pub fn grad_check<F>(
    function: F,
    parameters: &[(String, Tensor)],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |params: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|(n, t)| tape.param(n.clone(), t.clone()))
            .collect();
        let out = function(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = parameters
        .iter()
        .map(|(n, t)| tape.param(n.clone(), t.clone()))
        .collect();
    let out = function(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<(String, Tensor)> = parameters.to_vec();
    let mut blocks = Vec::with_capacity(parameters.len());
    for (b, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, parameters[b].1.shape());
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..analytic.numel() {
            let x0 = parameters[b].1.data()[k];
            let h = fd_step(x0);
            work[b].1.data_mut()[k] = x0 + h;
            let plus = evaluate(&work)?;
            work[b].1.data_mut()[k] = x0 - h;
            let minus = evaluate(&work)?;
            work[b].1.data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport {
            name: parameters[b].0.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            numel: analytic.numel(),
        });
    }
    let passed = blocks.iter().all(|b| b.max_rel_error < tolerance);
    Ok(GradCheckReport {
        blocks,
        tolerance,
        passed,
    })
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}
