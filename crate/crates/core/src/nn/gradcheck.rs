//! Central finite-difference verification of analytic gradients.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so gradients that are zero up to
/// round-off compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradients stored on `params` against central differences of
/// `model_fn`, one report entry per parameter tensor.
pub fn finite_difference_check<F>(model_fn: F, params: &ParamSet, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_check", "epsilon must be positive"));
    }
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    for (name, tensor) in params.iter() {
        let mut block = BlockReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            passed: true,
            failure: None,
        };
        let Some(analytic) = tensor.grad() else {
            block.passed = false;
            block.failure = Some("no analytic gradient".into());
            blocks.push(block);
            continue;
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = model_fn(&probe);
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = model_fn(&probe);
            probe.get_mut(name)?.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (p, m) => {
                    block.passed = false;
                    block.failure = Some(format!(
                        "non-finite or failed evaluation at index {i}: {:?} / {:?}",
                        p.map_err(|e| e.to_string()),
                        m.map_err(|e| e.to_string())
                    ));
                    break;
                }
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            if !err.is_finite() {
                block.passed = false;
                block.failure = Some(format!("non-finite analytic gradient at index {i}"));
                break;
            }
            if err > block.max_rel_error {
                block.max_rel_error = err;
                block.worst_index = i;
            }
        }
        if block.max_rel_error >= tol {
            block.passed = false;
        }
        blocks.push(block);
    }
    Ok(GradCheckReport { tolerance: tol, blocks })
}

/// Runs `build` on a fresh tape with `params` bound as leaves and returns the
/// scalar loss value.
pub fn evaluate_loss<B>(params: &ParamSet, build: &B) -> Result<f64>
where
    B: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    Ok(tape.value(loss).data()[0])
}

/// Forward + backward; returns the loss and a copy of `params` with
/// gradients populated.
pub fn loss_and_grads<B>(params: &ParamSet, build: &B) -> Result<(f64, ParamSet)>
where
    B: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    let mut out = params.clone();
    out.zero_grads();
    out.accumulate_grads(&tape, &bound, 1.0)?;
    Ok((tape.value(loss).data()[0], out))
}

/// Analytic gradients of `build` checked against finite differences.
pub fn check_builder<B>(params: &ParamSet, build: B, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let (_, with_grads) = loss_and_grads(params, &build)?;
    finite_difference_check(|p| evaluate_loss(p, &build), &with_grads, eps, tol)
}
