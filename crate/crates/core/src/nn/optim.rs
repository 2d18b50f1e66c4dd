use super::params::Parameters;
use super::Matrix;
use crate::{Error, Result};

pub trait Optimizer<P: Parameters> {
    fn step(&mut self, params: &mut P, grads: &P) -> Result<()>;
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl<P: Parameters> Optimizer<P> for Sgd {
    fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        params.add_scaled(grads, -self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Option<(Vec<Matrix>, Vec<Matrix>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: None,
        }
    }
}

impl<P: Parameters> Optimizer<P> for Adam {
    fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        let (m, v) = self.moments.get_or_insert_with(|| {
            let zeros: Vec<Matrix> = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            (zeros.clone(), zeros)
        });
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() || m.len() != grads.len() {
            return Err(Error::dims("Adam::step", "tensor counts differ"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(Error::dims("Adam::step", "shape mismatch"));
            }
            let data = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vhat = *vi / c2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Matrix::row_vector(&[1.0, -1.0]);
        let g = Matrix::row_vector(&[0.5, -0.5]);
        Sgd { lr: 0.1 }.step(&mut p, &g).unwrap();
        assert_eq!(p.data(), [0.95, -0.95]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Matrix::row_vector(&[3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * x);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Matrix::row_vector(&[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
