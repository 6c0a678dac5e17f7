//! Central-difference verification of tape gradients.

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// (analytic, numeric) for every coordinate, in parameter order.
    pub entries: Vec<(f64, f64)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

impl GradCheckReport {
    pub fn max_abs_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, (a, n)| m.max((a - n).abs()))
    }

    /// Largest relative error among coordinates whose gradient magnitude is at least `floor`.
    pub fn max_rel_error_above(&self, floor: f64) -> f64 {
        self.entries
            .iter()
            .filter(|(a, n)| a.abs().max(n.abs()) >= floor)
            .fold(0.0, |m, &(a, n)| m.max(rel_error(a, n)))
    }
}

fn eval<F>(f: &F, params: &[Mat]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` at `params` against
/// `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Mat], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::Input(format!("finite-difference step {h} outside [1e-5, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    tape.backward(out)?;
    let analytic: Vec<Mat> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, entries: Vec::new() };
    let mut probe: Vec<Mat> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for (ci, &a) in grad.iter().enumerate() {
            let orig = params[pi].as_slice().expect("standard layout")[ci];
            probe[pi].as_slice_mut().expect("standard layout")[ci] = orig + h;
            let plus = eval(&f, &probe)?;
            probe[pi].as_slice_mut().expect("standard layout")[ci] = orig - h;
            let minus = eval(&f, &probe)?;
            probe[pi].as_slice_mut().expect("standard layout")[ci] = orig;

            let n = (plus - minus) / (2.0 * h);
            let rel = rel_error(a, n);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = n;
            }
            report.entries.push((a, n));
        }
    }
    Ok(report)
}
