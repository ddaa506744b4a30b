use crate::error::{CrnError, Result};

/// Outcome of comparing an analytic gradient against central finite
/// differences, grouped by named parameter family.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub families: Vec<FamilyError>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct FamilyError {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            out.push_str(&format!("{:<24} max_rel_err {:.3e}\n", f.name, f.max_rel_error));
        }
        out.push_str(&format!(
            "overall max_rel_err {:.3e} tolerance {:.1e} -> {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Relative error with the guarded denominator max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `analytic` against the central difference (f(p+h) - f(p-h)) / 2h
/// per coordinate. `families` names contiguous ranges of the flat parameter
/// vector: (name, start, len). The loss must be deterministic; this is
/// verified by evaluating twice at the base point.
pub fn finite_diff_check(
    loss_fn: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    families: &[(String, usize, usize)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(CrnError::Dimension(format!(
            "gradcheck: params {} analytic {}",
            params.len(),
            analytic.len()
        )));
    }
    if h <= 0.0 {
        return Err(CrnError::Range("gradcheck: h must be positive".into()));
    }
    let base = loss_fn(params);
    let again = loss_fn(params);
    if base.to_bits() != again.to_bits() {
        return Err(CrnError::Determinism(format!(
            "loss({}) then loss({}) at identical params",
            base, again
        )));
    }

    let mut work = params.to_vec();
    let mut family_errors: Vec<FamilyError> = Vec::with_capacity(families.len());
    let mut overall: f64 = 0.0;
    for (name, start, len) in families {
        let mut fam_max: f64 = 0.0;
        for i in *start..*start + *len {
            let orig = work[i];
            work[i] = orig + h;
            let up = loss_fn(&work);
            work[i] = orig - h;
            let down = loss_fn(&work);
            work[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(analytic[i], numeric);
            if rel > fam_max {
                fam_max = rel;
            }
        }
        overall = overall.max(fam_max);
        family_errors.push(FamilyError { name: name.clone(), max_rel_error: fam_max });
    }

    Ok(GradCheckReport {
        families: family_errors,
        tolerance,
        max_rel_error: overall,
        pass: overall < tolerance,
    })
}

/// Convenience wrapper for a single unnamed family covering every
/// coordinate.
pub fn finite_diff_check_flat(
    loss_fn: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let fam = vec![("all".to_string(), 0usize, params.len())];
    finite_diff_check(loss_fn, params, analytic, &fam, h, tolerance)
}
