//! Central finite-difference check of graph gradients, in 64-bit.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate holding the maximum.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `x +- step` evaluations crossed a ReLU or max-pool
    /// switch, where the function is not differentiable along the segment.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        let (max_rel_error, worst_index) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index)
        } else {
            (self.max_rel_error, self.worst_index)
        };
        Self {
            max_rel_error,
            worst_index,
            checked: self.checked + other.checked,
            skipped_kinks: self.skipped_kinks + other.skipped_kinks,
        }
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            skipped_kinks: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    let v = g.value(y).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    Ok((v, g.kink_signature()))
}

/// Compare the graph gradient of scalar `f` at `x` with central differences
/// over every coordinate.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    gradient_check_at(f, x, step, &coords)
}

/// Like [`gradient_check`], restricted to the listed coordinates.
pub fn gradient_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Usage(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let base = g.value(y).item()?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    let signature = g.kink_signature();
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (fp, sp) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let (fm, sm) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if sp != signature || sm != signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.5, 0.0, -0.25]).unwrap();
        let r = gradient_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let s = g.sigmoid(xv).unwrap();
        let y = g.sum(s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[0.25]);
        let r = gradient_check(
            |g, x| {
                let s = g.sigmoid(x)?;
                g.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kinks_are_skipped() {
        let x = Tensor::new(vec![2], vec![1e-4, 2.0]).unwrap();
        let r = gradient_check(
            |g, x| {
                let r = g.relu(x)?;
                g.sum(r)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = gradient_check(
            |g, x| {
                let d = g.div(x, x)?;
                g.sum(d)
            },
            &x,
            1e-3,
        );
        assert!(r.is_err());
    }
}
