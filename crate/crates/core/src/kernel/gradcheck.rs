use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative errors below this denominator are measured against it instead, so
/// that near-zero gradient entries do not turn rounding noise into huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` gradients with five-point central differences of `f`
/// around `params` (truncation error O(h^4)).
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn finite_diff_grad_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(Error::Dimension {
                op: "grad_check",
                lhs: p.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates: 0,
        tol,
        passed: true,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            let mut at = |offset: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[pi].data_mut()[ei] = orig + offset;
                f(work)
            };
            let p2 = at(2.0 * h, &mut work)?;
            let p1 = at(h, &mut work)?;
            let m1 = at(-h, &mut work)?;
            let m2 = at(-2.0 * h, &mut work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let exact = analytic[pi].data()[ei];
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_ERR_FLOOR);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
