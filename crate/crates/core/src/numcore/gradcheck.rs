//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// A differentiable map from a list of tensors to one tensor.
pub trait Differentiable {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product: one gradient per input, same shapes as the inputs.
    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnOp<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> Differentiable for FnOp<F, B>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        (self.backward)(inputs, upstream)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
    /// Entries skipped by [`check_scalar_kink_aware`] because a kink lies within `±h`.
    pub kinks_excluded: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks `op` by contracting its output with a random upstream vector and
/// comparing the VJP against central differences with step `h`.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor], h: f64, seed: u64) -> Result<GradCheckReport> {
    let out = op.forward(inputs)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("grad_check forward"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream = Tensor::randn(out.shape(), &mut rng);
    let analytic = op.backward(inputs, &upstream)?;
    let scalar = |xs: &[Tensor]| -> Result<f64> { op.forward(xs)?.dot(&upstream) };
    check_scalar(&scalar, inputs, &analytic, h)
}

/// Compares `analytic[i]` against central differences of the scalar function `f`.
pub fn check_scalar(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
) -> Result<GradCheckReport> {
    check_entries(f, inputs, analytic, h, None)
}

/// Like [`check_scalar`], but an entry whose central difference misses by more
/// than `tol` is excluded when its two one-sided differences disagree by more
/// than `tol` (a kink within `±h`) and the analytic value matches one of them
/// to `kink_match`.
pub fn check_scalar_kink_aware(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
    kink_match: f64,
) -> Result<GradCheckReport> {
    check_entries(f, inputs, analytic, h, Some((tol, kink_match)))
}

fn check_entries(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    kinks: Option<(f64, f64)>,
) -> Result<GradCheckReport> {
    if analytic.len() != inputs.len() {
        return Err(Error::dim("grad_check", inputs.len(), analytic.len()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
        kinks_excluded: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::dim(
                "grad_check",
                format!("{:?}", inputs[i].shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite("grad_check backward"));
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("grad_check perturbation"));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if let Some((tol, kink_match)) = kinks {
                if err > tol {
                    let center = f(&work)?;
                    let right = (plus - center) / h;
                    let left = (center - minus) / h;
                    let kink = relative_error(right, left) > tol;
                    if kink && relative_error(a, left).min(relative_error(a, right)) < kink_match {
                        report.kinks_excluded += 1;
                        report.entries_checked += 1;
                        continue;
                    }
                }
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let op = FnOp {
            forward: |xs: &[Tensor]| Ok(xs[0].scale(3.0)),
            backward: |_: &[Tensor], up: &Tensor| Ok(vec![up.scale(3.0)]),
        };
        let x = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let r = grad_check(&op, &[x], 1e-6, 1).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.entries_checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let op = FnOp {
            forward: |xs: &[Tensor]| Ok(xs[0].map(|v| v * v)),
            backward: |xs: &[Tensor], up: &Tensor| {
                let g = up.data().iter().zip(xs[0].data()).map(|(u, v)| u * v).collect();
                Ok(vec![Tensor::from_vec(xs[0].shape(), g)?])
            },
        };
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -0.5]).unwrap();
        let r = grad_check(&op, &[x], 1e-6, 2).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_is_an_error() {
        let op = FnOp {
            forward: |xs: &[Tensor]| Ok(xs[0].map(f64::ln)),
            backward: |xs: &[Tensor], up: &Tensor| Ok(vec![up.clone(), xs[0].clone()][..1].to_vec()),
        };
        let x = Tensor::from_vec(&[2], vec![-1.0, 1.0]).unwrap();
        assert!(matches!(grad_check(&op, &[x], 1e-6, 0), Err(Error::NonFinite(_))));
    }
}
