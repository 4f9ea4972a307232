use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the tape gradient of a scalar function of one tensor against
/// central differences and returns the maximum relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`grad_check`]: perturbs every coordinate of every tensor.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let first = tape.value(loss).item();
    let second = eval(points)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (t, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; points[t].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (t, i);
            }
        }
    }
    Ok(report)
}
