use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    /// Loss value and analytic gradient at `params`.
    fn evaluate(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Loss only. Override when the gradient is expensive.
    fn loss(&mut self, params: &[f64]) -> Result<f64> {
        self.evaluate(params).map(|(l, _)| l)
    }
}

/// Adapts a closure returning `(loss, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn evaluate(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0)(params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
    /// Parameter index where the maximum was attained.
    pub worst_index: usize,
}

/// Compares the analytic gradient with central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    f: &mut O,
    params: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {h}")));
    }
    let (base, analytic) = f.evaluate(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {base}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut theta = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f.loss(&theta)?;
        theta[i] = orig - h;
        let minus = f.loss(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss perturbing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        parameter_count: params.len(),
        worst_index: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_under_central_differences() {
        let mut f = FnObjective(|p: &[f64]| (p[0] * p[0], vec![2.0 * p[0]]));
        let r = finite_diff_check(&mut f, &[3.0], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.parameter_count, 1);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut f = FnObjective(|p: &[f64]| (4.2, vec![0.0; p.len()]));
        let r = finite_diff_check(&mut f, &[1.0, -2.0, 0.5], DEFAULT_STEP).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut f = FnObjective(|p: &[f64]| (p[0] * p[0], vec![3.0 * p[0]]));
        let r = finite_diff_check(&mut f, &[2.0], DEFAULT_STEP).unwrap();
        assert!((r.max_relative_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut f = FnObjective(|p: &[f64]| (1.0 / (p[0] - p[0]) * 0.0, vec![0.0]));
        assert!(matches!(
            finite_diff_check(&mut f, &[1.0], DEFAULT_STEP),
            Err(Error::Numeric(_))
        ));
        let mut g = FnObjective(|_: &[f64]| (0.0, vec![0.0]));
        assert!(finite_diff_check(&mut g, &[1.0], 0.0).is_err());
    }
}
