//! Central finite differences against analytic gradients.

use rand::seq::index;

use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::rng;

/// Floor on the denominator of the relative error. Entries whose gradient is
/// below this scale are dominated by round-off in the difference quotient.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a| + |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences on up to `per_tensor` randomly chosen entries of every
/// trainable tensor.
pub fn grad_check<F>(params: &ParamSet<f64>, loss_fn: F, eps: f64, per_tensor: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, Grads<f64>)>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    let (_, analytic) = loss_fn(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, p) in params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let len = p.value.len();
        let mut r = rng::stream(seed, &[ti as u64]);
        let picks = index::sample(&mut r, len, per_tensor.min(len));
        for i in picks.iter() {
            let orig = params.value(ti)[i];
            probe.value_mut(ti)[i] = orig + eps;
            let (up, _) = loss_fn(&probe)?;
            probe.value_mut(ti)[i] = orig - eps;
            let (down, _) = loss_fn(&probe)?;
            probe.value_mut(ti)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic.get(ti)[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn exact_for_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap(), true);
        let f = |p: &ParamSet<f64>| {
            let w = p.value(0);
            let loss = w.iter().map(|v| v * v).sum::<f64>();
            let g = Grads(vec![Tensor::from_vec(&[3], w.iter().map(|v| 2.0 * v).collect()).unwrap()]);
            Ok((loss, g))
        };
        let rep = grad_check(&ps, f, 1e-4, 3, 0).unwrap();
        assert!(rep.max_rel_error < 1e-9);
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn zero_loss_has_zero_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let f = |p: &ParamSet<f64>| Ok((0.0, p.zero_grads()));
        let rep = grad_check(&ps, f, 1e-3, 2, 0).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec(&[1], vec![1.0]).unwrap(), true);
        let f = |p: &ParamSet<f64>| {
            let w = p.value(0)[0];
            Ok((w * w, Grads(vec![Tensor::from_vec(&[1], vec![w]).unwrap()])))
        };
        assert!(grad_check(&ps, f, 1e-4, 1, 0).unwrap().max_rel_error > 0.3);
        assert!(grad_check(&ps, |_| Ok((0.0, ps.zero_grads())), 1.0, 1, 0).is_err());
    }
}
