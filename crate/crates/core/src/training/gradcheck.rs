use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{batch_loss, Labels, ModelParams, SampleView};
use crate::tensor::Mat;

pub const DEFAULT_GRADCHECK_EPS: f64 = 1e-4;
pub const DEFAULT_GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every tensor.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[Mat], eps: f64) -> Result<Vec<Mat>>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be positive")));
    }
    let mut work: Vec<Mat> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let mut g = Mat::zeros(params[ti].rows(), params[ti].cols());
        for i in 0..params[ti].len() {
            let orig = params[ti].data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let plus = loss_fn(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let minus = loss_fn(&work)?;
            work[ti].data_mut()[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss perturbing tensor {ti} entry {i}"
                )));
            }
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max|a − n| / max(max|a|, max|n|, 1e-8)` over one tensor.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub shape: (usize, usize),
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn compare_gradients(names: &[String], analytic: &[Mat], numeric: &[Mat], tolerance: f64) -> Result<GradCheckReport> {
    if names.len() != analytic.len() || analytic.len() != numeric.len() {
        return Err(Error::shape("gradient tables differ in length"));
    }
    let mut tensors = Vec::with_capacity(names.len());
    for ((name, a), n) in names.iter().zip(analytic).zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::shape(format!("`{name}`: {:?} vs {:?}", a.shape(), n.shape())));
        }
        let err = relative_error(a, n);
        tensors.push(TensorCheck {
            name: name.clone(),
            shape: a.shape(),
            max_rel_error: err,
            max_abs_grad: a.max_abs(),
            passed: err < tolerance && err.is_finite(),
        });
    }
    Ok(GradCheckReport { tolerance, tensors })
}

fn loss_at(
    params: &ModelParams,
    tensors: &[Mat],
    samples: &[SampleView<'_>],
    labels: &[&Labels],
    weights: Option<&[f64]>,
) -> Result<(Tape, crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = tensors.iter().map(|m| tape.leaf(m.clone())).collect();
    let (loss, _) = batch_loss(&mut tape, params, &vars, samples, labels, weights)?;
    Ok((tape, loss, vars))
}

/// Backprop gradients of the batch loss for every model tensor.
pub fn analytic_gradients(
    params: &ModelParams,
    samples: &[SampleView<'_>],
    labels: &[&Labels],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<Mat>)> {
    let (tape, loss, vars) = loss_at(params, params.tensors(), samples, labels, weights)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss);
    let out = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, m)| grads.get(*v, m.shape()))
        .collect();
    Ok((value, out))
}

/// Analytic against numeric gradients of the end-to-end loss.
pub fn model_gradcheck(
    params: &ModelParams,
    samples: &[SampleView<'_>],
    labels: &[&Labels],
    weights: Option<&[f64]>,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(params, samples, labels, weights)?;
    let numeric = finite_diff_grad(
        |t| {
            let (tape, loss, _) = loss_at(params, t, samples, labels, weights)?;
            Ok(tape.value(loss).data()[0])
        },
        params.tensors(),
        eps,
    )?;
    compare_gradients(params.layout().names(), &analytic, &numeric, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|p| Ok(p[0].data()[0].powi(2)), &[Mat::filled(1, 1, 3.0)], 1e-4).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let params = [Mat::filled(2, 3, 1.5), Mat::filled(1, 1, -2.0)];
        let g = finite_diff_grad(|_| Ok(4.0), &params, 1e-4).unwrap();
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn non_finite_loss_errors() {
        let r = finite_diff_grad(|p| Ok(p[0].data()[0].ln()), &[Mat::filled(1, 1, 0.0)], 1e-4);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn identity_passes_and_corruption_fails() {
        // f(θ) = Σ θ², gradient 2θ.
        let theta = vec![Mat::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]])];
        let analytic = vec![theta[0].map(|v| 2.0 * v)];
        let numeric = finite_diff_grad(|p| Ok(p[0].data().iter().map(|v| v * v).sum()), &theta, 1e-4).unwrap();
        let names = vec!["theta".to_string()];
        assert!(compare_gradients(&names, &analytic, &numeric, 1e-3).unwrap().passed());
        let corrupted = vec![analytic[0].map(|v| v * 1.1)];
        let report = compare_gradients(&names, &corrupted, &numeric, 1e-3).unwrap();
        assert!(!report.passed());
        assert!(report.worst() > 0.05);
    }
}
