//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
/// Coordinates where `|analytic| + |numeric|` is below this are not compared.
pub const SIGNIFICANCE_FLOOR: f64 = 1e-8;
/// The extrapolated quotient carries roundoff of up to `3 eps |f| / h`. Only
/// gradients this many times larger than that can be resolved to 1e-4.
pub const ROUNDOFF_MARGIN: f64 = 1e4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub compared: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU or abs kink.
    pub kinks: usize,
    /// (input index, coordinate, analytic, numeric) of the worst comparison.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coordinates += other.coordinates;
        self.compared += other.compared;
        self.kinks += other.kinks;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares the tape gradient of `f` against Richardson-extrapolated central
/// differences (steps `h` and `h / 2`) for every coordinate of every input.
///
/// `f` must build a scalar loss from leaves it receives; it is re-run for
/// each perturbed coordinate on a fresh tape.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let mut at = |delta: f64| -> Result<(f64, Vec<bool>)> {
                work[i].data_mut()[j] = orig + delta;
                eval(&work)
            };
            let (plus, sig_plus) = at(h)?;
            let (minus, sig_minus) = at(-h)?;
            let (plus2, sig_plus2) = at(h / 2.0)?;
            let (minus2, sig_minus2) = at(-h / 2.0)?;
            work[i].data_mut()[j] = orig;
            report.coordinates += 1;
            if sig_plus != sig_minus || sig_plus2 != sig_plus || sig_minus2 != sig_plus {
                report.kinks += 1;
                continue;
            }
            // Richardson extrapolation cancels the h^2 truncation term
            let coarse = (plus - minus) / (2.0 * h);
            let fine = (plus2 - minus2) / h;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = grads[j];
            let f_max = [plus, minus, plus2, minus2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let roundoff = 3.0 * f64::EPSILON * f_max / h;
            if a.abs() + numeric.abs() <= SIGNIFICANCE_FLOOR.max(ROUNDOFF_MARGIN * roundoff) {
                continue;
            }
            report.compared += 1;
            let rel = relative_error(a, numeric);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
