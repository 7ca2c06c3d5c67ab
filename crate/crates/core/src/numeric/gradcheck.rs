use crate::error::{Error, Result};

/// Gradients whose magnitudes are both below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative disagreement of two gradient estimates,
/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `params` along
/// each coordinate in `coords` and reports the worst relative error.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &k in coords {
        if k >= params.len() {
            return Err(Error::InvalidArgument(format!("coordinate {k} out of range")));
        }
        let base = point[k];
        point[k] = base + step;
        let up = f(&point)?;
        point[k] = base - step;
        let down = f(&point)?;
        point[k] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = k;
        }
        report.analytic.push(analytic[k]);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = grad_check(|w| Ok(w[0] * w[0]), &[3.0], &[6.0], 1e-4, &[0]).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|_| Ok(4.0), &[1.0, 2.0], &[0.0, 0.0], 1e-4, &[0, 1]).unwrap();
        assert_eq!(r.numeric, vec![0.0, 0.0]);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient_and_rejects_bad_input() {
        let r = grad_check(|w| Ok(w[0] * w[0]), &[3.0], &[5.0], 1e-4, &[0]).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert!(grad_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-4, &[0]).is_err());
        assert!(grad_check(|_| Ok(1.0), &[1.0], &[0.0], 0.0, &[0]).is_err());
    }
}
