//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences
/// with step `h`, over every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &leaves)?;
        let grads = tape.backward(out)?;
        leaves.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let leaves: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &leaves)?;
        tape.scalar_value(out)
    };
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..work[ti].numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(grad[i], numeric));
            report.max_abs_error = report.max_abs_error.max((grad[i] - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
