use rand::Rng;

use super::params::{prefixed, Parameters};
use super::{ops, Matrix};
use crate::{Error, Result};

/// Affine map `X·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            w: Matrix::uniform(input, output, input, rng),
            b: Matrix::uniform(1, output, input, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear(&self.w, &self.b, x)
    }

    /// Returns parameter gradients and `dL/dX`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(Linear, Matrix)> {
        let grads = Linear {
            w: x.t_matmul(dy)?,
            b: dy.sum_rows(),
        };
        let dx = dy.matmul_t(&self.w)?;
        Ok((grads, dx))
    }
}

pub fn linear(w: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::dims(
            "linear",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct FeedForwardCache {
    x: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

impl FeedForward {
    pub fn new<R: Rng>(d_model: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(d_model, hidden, rng),
            outer: Linear::new(hidden, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, FeedForwardCache)> {
        let pre = self.inner.forward(x)?;
        let hidden = pre.map(ops::relu);
        let y = self.outer.forward(&hidden)?;
        Ok((
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Matrix) -> Result<(FeedForward, Matrix)> {
        let (outer, mut dh) = self.outer.backward(&cache.hidden, dy)?;
        for (g, &p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let (inner, dx) = self.inner.backward(&cache.x, &dh)?;
        Ok((FeedForward { inner, outer }, dx))
    }
}

pub fn ffn(params: &FeedForward, x: &Matrix) -> Result<Matrix> {
    params.forward(x)
}

impl Parameters for FeedForward {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("inner", self.inner.tensors())
            .chain(prefixed("outer", self.outer.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.inner.tensors_mut();
        v.extend(self.outer.tensors_mut());
        v
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        let mut gain = Matrix::zeros(1, d);
        gain.fill(1.0);
        LayerNorm {
            gain,
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        let d = x.cols();
        if d != self.gain.cols() {
            return Err(Error::dims("layer_norm", format!("{d} vs {}", self.gain.cols())));
        }
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut out = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let n = (row[j] - mean) * inv;
                normalized[(i, j)] = n;
                out[(i, j)] = n * self.gain[(0, j)] + self.bias[(0, j)];
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix) -> Result<(LayerNorm, Matrix)> {
        let (rows, d) = dy.shape();
        let mut grads = LayerNorm {
            gain: Matrix::zeros(1, d),
            bias: Matrix::zeros(1, d),
        };
        let mut dx = Matrix::zeros(rows, d);
        for i in 0..rows {
            let n = cache.normalized.row(i);
            let g = dy.row(i);
            let dn: Vec<f64> = (0..d).map(|j| g[j] * self.gain[(0, j)]).collect();
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                grads.gain[(0, j)] += g[j] * n[j];
                grads.bias[(0, j)] += g[j];
                dx[(i, j)] = cache.inv_std[i] * (dn[j] - mean_dn - n[j] * mean_dn_n);
            }
        }
        Ok((grads, dx))
    }
}

impl Parameters for LayerNorm {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.gain, &mut self.bias]
    }
}
