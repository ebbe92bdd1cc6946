//! Central finite-difference check of graph gradients.

use super::graph::{Graph, Var};
use super::tensor::{Precision, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a - n| / (|a| + |n| + 1e-12)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree (a ReLU kink sits within
    /// `eps` of the point).
    pub excluded_kinks: usize,
    /// Coordinates whose gradient is below the round-off resolution of the
    /// difference quotient.
    pub below_resolution: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn eval<F, E>(f: &F, point: &Tensor) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(point.clone())?;
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(NumericsError::NotScalar { shape: v.shape().to_vec() }.into());
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" }.into());
    }
    Ok(v)
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// `f` receives a fresh 64-bit graph and the node holding the point; it must
/// return a scalar node. `coords` restricts the check to a subset of flat
/// indices.
pub fn grad_check<F, E>(
    f: F,
    point: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Precondition("eps must be positive".into()).into());
    }
    let mut g = Graph::new(Precision::F64);
    let mut p = point.clone();
    p.requires_grad = true;
    let x = g.leaf(&p)?;
    let y = f(&mut g, x)?;
    let f0 = g.value(y).item();
    if !f0.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" }.into());
    }
    g.backward(y)?;
    let analytic = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; point.len()]);

    let all: Vec<usize>;
    let idx: &[usize] = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let resolution = 100.0 * f64::EPSILON * f0.abs().max(1.0) / eps;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded_kinks: 0,
        below_resolution: 0,
    };
    let mut probe = point.clone();
    probe.requires_grad = false;
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 10.0 * eps + 2.0 * resolution {
            report.excluded_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if a.abs() < resolution && numeric.abs() < resolution {
            report.below_resolution += 1;
            continue;
        }
        let abs = (a - numeric).abs();
        let rel = abs / (a.abs() + numeric.abs() + 1e-12);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let p = Tensor::from_fn(&[7], |i| (i as f64) * 0.3 - 1.0);
        let r = grad_check::<_, NumericsError>(
            |g, x| {
                let s = g.sum_squares(x)?;
                g.scale(s, 0.5)
            },
            &p,
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.passes(1e-8), "{:?}", r);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let p = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
        let r = grad_check::<_, NumericsError>(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &p,
            1e-6,
            None,
        )
        .unwrap();
        assert_eq!(r.excluded_kinks, 1);
        assert!(r.passes(1e-8));
    }

    #[test]
    fn rejects_bad_eps() {
        let p = Tensor::zeros(&[1]);
        assert!(grad_check::<_, NumericsError>(|g, x| g.sum(x), &p, 0.0, None).is_err());
    }
}
