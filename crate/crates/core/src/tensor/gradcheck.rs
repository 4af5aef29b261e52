//! Central-difference gradient verification.
//!
//! The caller packs whatever parameters it wants checked into one flat f64
//! vector, supplies a pure forward function (flat params -> scalar loss) plus
//! the analytic gradient it got from the tape, and receives the worst
//! relative disagreement. Relative error uses a floor so near-zero gradient
//! pairs are compared absolutely instead of dividing by noise.

use super::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// worst relative error across all checked coordinates
    pub worst_rel: f64,
    /// coordinate where it happened
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.worst_rel <= tol
    }
}

/// Compare `analytic` against central differences of `loss` around `x0`.
///
/// `eps` scales the probe step per coordinate (`h = eps·max(1,|x|)`); 1e-5 is
/// a good default for f64. `floor` guards the relative-error denominator.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    assert_eq!(
        x0.len(),
        analytic.len(),
        "analytic gradient length must match parameter count"
    );
    let mut probe = x0.to_vec();
    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: x0.len(),
    };
    for i in 0..x0.len() {
        let h = eps * x0[i].abs().max(1.0);
        probe[i] = x0[i] + h;
        let up = loss(&probe)?;
        probe[i] = x0[i] - h;
        let down = loss(&probe)?;
        probe[i] = x0[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
