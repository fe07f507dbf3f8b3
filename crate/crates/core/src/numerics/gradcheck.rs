//! Central finite-difference gradient verification.

use super::{NumericsError, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat index) of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-10);
    (a - b).abs() / denom
}

/// Compare `analytic_grads` against central finite differences of `loss_fn`
/// over every parameter element.
///
/// `eps` must lie in (0, 1e-2]; the step applied to element w is
/// `eps * (1 + |w|)`.
pub fn grad_check(
    loss_fn: &dyn Fn(&ParamSet) -> Result<f64, NumericsError>,
    params: &ParamSet,
    analytic_grads: &ParamSet,
    eps: f64,
) -> Result<GradCheckReport, NumericsError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NumericsError::BadShape(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst = None;
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for i in 0..n {
            let w0 = params.get(name).unwrap().data()[i];
            let h = eps * (1.0 + w0.abs());
            work.get_mut(name).unwrap().data_mut()[i] = w0 + h;
            let f_plus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = w0 - h;
            let f_minus = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = w0;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(NumericsError::NonFinite(format!(
                    "non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic_grads
                .get(name)
                .ok_or_else(|| {
                    NumericsError::BadShape(format!("missing analytic gradient for {name}"))
                })?
                .data()[i];
            if !an.is_finite() {
                return Err(NumericsError::NonFinite(format!(
                    "non-finite analytic gradient at {name}[{i}]"
                )));
            }
            // skip entries where both are numerically zero
            let r = if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                0.0
            } else {
                rel_err(fd, an)
            };
            if r > max_rel {
                max_rel = r;
                worst = Some((name.clone(), i));
            }
            sum_rel += r;
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: if checked > 0 {
            sum_rel / checked as f64
        } else {
            0.0
        },
        checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_function_is_exact() {
        // f(w) = 3*w0 - 2*w1; FD is exact for linear functions
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(vec![0.7, -1.3]));
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::from_vec(vec![3.0, -2.0]));
        let f = |p: &ParamSet| -> Result<f64, NumericsError> {
            let w = p.get("w").unwrap().data();
            Ok(3.0 * w[0] - 2.0 * w[1])
        };
        let report = grad_check(&f, &params, &grads, 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(vec![0.5, 1.5]));
        let f = |p: &ParamSet| -> Result<f64, NumericsError> {
            let w = p.get("w").unwrap().data();
            Ok(w[0] * w[0] + w[1] * w[1])
        };
        let mut grads = ParamSet::new();
        // true gradient is [1.0, 3.0]; double the first entry
        grads.insert("w", Tensor::from_vec(vec![2.0, 3.0]));
        let report = grad_check(&f, &params, &grads, 1e-5).unwrap();
        assert!(report.max_rel_err > 0.3, "{}", report.max_rel_err);
        assert_eq!(report.worst, Some(("w".to_string(), 0)));
    }

    #[test]
    fn bad_eps_rejected() {
        let params = ParamSet::new();
        let grads = ParamSet::new();
        let f = |_: &ParamSet| Ok(0.0);
        assert!(grad_check(&f, &params, &grads, 0.0).is_err());
        assert!(grad_check(&f, &params, &grads, 0.5).is_err());
    }
}
