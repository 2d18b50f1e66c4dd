use super::Matrix;
use crate::{Error, Result};

/// A fixed, ordered collection of named parameter tensors.
///
/// `tensors` and `tensors_mut` must yield the same tensors in the same
/// order; gradients are stored in a value of the same type.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// `self += alpha · other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        let src = other.tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::dims("Parameters::add_scaled", "tensor counts differ"));
        }
        for (d, (_, s)) in dst.into_iter().zip(src) {
            d.add_scaled(s, alpha)?;
        }
        Ok(())
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Matrix)>,
) -> impl Iterator<Item = (String, &'a Matrix)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(name, m)| (format!("{prefix}.{name}"), m))
}

impl Parameters for Matrix {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("value".into(), self)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| prefixed(&i.to_string(), p.tensors()).collect::<Vec<_>>())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}
