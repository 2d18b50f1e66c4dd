use super::Matrix;
use crate::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&softmax(m.row(i))?);
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Cross-entropy of `softmax(logits)` against `target`; returns the loss and
/// the gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside {} classes",
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}
