//! Central-difference gradient verification, the independent oracle for
//! every backward kernel. Runs at `f64` only.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Flat coordinate where the worst error occurred.
    pub worst_coord: usize,
}

/// Compares the reverse-mode gradient of a scalar-valued tensor function
/// against central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Relative error uses an absolute floor of 1e-8 in the denominator. Passes
/// iff the max relative error over all coordinates is <= `tol`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false)?;
        let out = f(&mut tape, v)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::invalid(format!(
                "grad_check: function output must be scalar, got {:?}",
                tape.value(out).shape()
            )));
        }
        Ok(tape.value(out).item())
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, v)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid(format!(
            "grad_check: function output must be scalar, got {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(v).expect("leaf gradient");

    // Numeric gradient, coordinate by coordinate.
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, pass: max_rel_err <= tol, worst_coord })
}
