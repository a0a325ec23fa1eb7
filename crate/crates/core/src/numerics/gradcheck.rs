//! Central finite-difference comparison against tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Worst mismatch found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub max_rel_error: Real,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar function of `inputs` against central
/// differences with step `eps`, perturbing every coordinate.
pub fn check<F>(inputs: &[Tensor], eps: Real, f: F) -> Result<Report>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = Report { max_rel_error: 0.0, worst_input: 0, worst_index: 0, checked: 0 };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = tape.grad(*v).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = relative_error(analytic[j], numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_input = k;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
