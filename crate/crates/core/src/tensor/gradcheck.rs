//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Pins a closure to the higher-ranked signature `grad_check` expects.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    if out.value().len() != 1 {
        return Err(Error::Shape("grad_check function must return a scalar".into()));
    }
    Ok(out.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(v);

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    let (worst, max_rel_err) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport { max_rel_err, worst, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_squares_is_tight() {
        let x = Tensor::from_fn(&[7], |i| 0.3 * i as f64 - 1.0);
        let r = grad_check(|_, x| Ok(x.square().mean()), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn detached_branch_is_flagged() {
        let x = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        let r = grad_check(|_, x| Ok(x.detach().square().sum()), &x, 1e-5).unwrap();
        assert!(r.analytic.data().iter().all(|&g| g == 0.0));
        assert!(r.max_rel_err > 0.99, "mismatch should be reported: {r:?}");
    }
}
