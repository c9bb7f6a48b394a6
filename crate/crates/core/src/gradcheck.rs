//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates the forward closure, so it stays
//! independent of every backward rule it checks.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base step; the actual step is `step · max(1, |x|)`.
    pub step: f64,
    /// Relative error denominator floor, `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-3,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::High);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)[0])
}

/// Compares backward-pass gradients of the scalar `f(inputs)` with central
/// differences for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::High);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = cfg.max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for idx in (0..n).step_by(stride) {
            let x = inputs[which].data()[idx];
            let h = cfg.step * x.abs().max(1.0);
            work[which].data_mut()[idx] = x + h;
            let plus = eval(&work, &f)?;
            work[which].data_mut()[idx] = x - h;
            let minus = eval(&work, &f)?;
            work[which].data_mut()[idx] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[idx], numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: which,
                    index: idx,
                    analytic: analytic[idx],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
