use super::{AutodiffError, Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-3, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub passed: bool,
}

fn evaluate<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(AutodiffError::NotScalar(value.shape().to_vec()));
    }
    Ok(value.item().as_f64())
}

/// Compares the gradients from [`Graph::backward`] with central finite
/// differences for every coordinate of every input.
///
/// `f` builds a scalar from the input variables. Per coordinate the error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<T: Scalar, F>(
    f: F,
    inputs: &[Tensor<T>],
    options: GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, passed: true };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for j in 0..inputs[which].len() {
            let x = inputs[which].data()[j];
            probe[which].data_mut()[j] = x + T::from_f64_lossy(options.step);
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[j] = x - T::from_f64_lossy(options.step);
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[j] = x;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.data()[j].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(options.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < options.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 4.0]).unwrap();
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let w = g.constant(w.clone());
                let y = g.linear(v[0], w)?;
                g.sum(y)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }
}
