use serde::Serialize;

use super::params::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamIndex {
    pub tensor: String,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<ParamIndex>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params`, scalar by scalar. The relative error of one scalar is
/// `|g_a − g_n| / max(|g_a| + |g_n|, 1e-8)`.
pub fn grad_check<P, F>(loss_fn: F, params: &P, analytic: &P, eps: f64) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss".into()))
        }
    };
    finite(loss_fn(params)?)?;

    let names: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    if grads.len() != names.len() || grads.iter().zip(&names).any(|(g, (_, n))| g.len() != *n) {
        return Err(Error::dims("grad_check", "analytic gradient layout differs from params"));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: None,
        checked: 0,
    };
    for (ti, (name, len)) in names.iter().enumerate() {
        for j in 0..*len {
            let orig = work.tensors_mut()[ti].data()[j];
            work.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let plus = finite(loss_fn(&work)?)?;
            work.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let minus = finite(loss_fn(&work)?)?;
            work.tensors_mut()[ti].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = grads[ti][j];
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst_parameter.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst_parameter = Some(ParamIndex {
                    tensor: name.clone(),
                    index: j,
                });
            }
        }
    }
    Ok(report)
}
