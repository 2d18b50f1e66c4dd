//! Scaled dot-product and multi-head attention with backward passes.

use rand::Rng;

use super::ops::{softmax_backward, softmax_unchecked};
use super::params::{prefixed, Parameters};
use super::Matrix;
use crate::{Error, Result};

/// Intermediate values of one attention call needed for backprop.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-stochastic attention distribution `A`.
    pub attention: Matrix,
    scale: f64,
}

/// `softmax(QKᵀ/√d)·V`; returns the output and the attention matrix.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    let (out, cache) = attention_forward(q, k, v, false)?;
    Ok((out, cache.attention))
}

/// With `causal`, query `i` only sees keys `0..=i`.
pub(crate) fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
) -> Result<(Matrix, AttentionCache)> {
    if q.cols() != k.cols() {
        return Err(Error::dims(
            "attention",
            format!("query width {} vs key width {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::dims(
            "attention",
            format!("{} keys vs {} values", k.rows(), v.rows()),
        ));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyDistribution);
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k)?;
    scores.scale(scale);
    let m = k.rows();
    let mut attention = Matrix::zeros(q.rows(), m);
    for i in 0..q.rows() {
        let visible = if causal { (i + 1).min(m) } else { m };
        let p = softmax_unchecked(&scores.row(i)[..visible]);
        attention.row_mut(i)[..visible].copy_from_slice(&p);
    }
    let out = attention.matmul(v)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            attention,
            scale,
        },
    ))
}

/// Backward through one attention call. `d_attention` is an extra upstream
/// gradient on `A` itself (e.g. from a copy distribution).
pub(crate) fn attention_backward(
    cache: &AttentionCache,
    d_out: &Matrix,
    d_attention: Option<&Matrix>,
) -> Result<(Matrix, Matrix, Matrix)> {
    let a = &cache.attention;
    let dv = a.t_matmul(d_out)?;
    let mut da = d_out.matmul_t(&cache.v)?;
    if let Some(extra) = d_attention {
        da.add_assign(extra)?;
    }
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let g = softmax_backward(a.row(i), da.row(i));
        ds.row_mut(i).copy_from_slice(&g);
    }
    ds.scale(cache.scale);
    let dq = ds.matmul(&cache.k)?;
    let dk = ds.t_matmul(&cache.q)?;
    Ok((dq, dk, dv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl Parameters for HeadProjection {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// Per-head projections plus the output map mixing concatenated heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadProjection>,
    pub output: Matrix,
}

impl MultiHeadParams {
    /// `d_model` split evenly across `heads`.
    pub fn new<R: Rng>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} not divisible into {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        let heads = (0..heads)
            .map(|_| HeadProjection {
                wq: Matrix::uniform(d_model, d_head, d_model, rng),
                wk: Matrix::uniform(d_model, d_head, d_model, rng),
                wv: Matrix::uniform(d_model, d_head, d_model, rng),
            })
            .collect();
        Ok(MultiHeadParams {
            heads,
            output: Matrix::uniform(d_model, d_model, d_model, rng),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn validate(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
        let mut concat = 0;
        for h in &self.heads {
            if h.wq.rows() != q.cols() || h.wk.rows() != k.cols() || h.wv.rows() != v.cols() {
                return Err(Error::dims("multi_head_attention", "projection input width"));
            }
            if h.wq.cols() != h.wk.cols() {
                return Err(Error::dims("multi_head_attention", "query/key head width"));
            }
            concat += h.wv.cols();
        }
        if concat != self.output.rows() {
            return Err(Error::dims(
                "multi_head_attention",
                format!("concat width {concat} vs output map {:?}", self.output.shape()),
            ));
        }
        Ok(())
    }
}

impl Parameters for MultiHeadParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v: Vec<_> = prefixed("heads", self.heads.tensors()).collect();
        v.push(("output".into(), &self.output));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.heads.tensors_mut();
        v.push(&mut self.output);
        v
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    pub output: Matrix,
    /// One `n × m` attention distribution per head.
    pub attention: Vec<Matrix>,
}

impl MultiHeadOutput {
    /// Uniform average of the per-head attention distributions.
    pub fn mean_attention(&self) -> Matrix {
        let mut mean = self.attention[0].clone();
        for a in &self.attention[1..] {
            mean.add_assign(a).expect("heads share a shape");
        }
        mean.scale(1.0 / self.attention.len() as f64);
        mean
    }
}

pub struct MultiHeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    heads: Vec<AttentionCache>,
    concat: Matrix,
}

/// `Concat(M_1..M_h)·W` with `M_i = Attention(Q·W_i^Q, K·W_i^K, V·W_i^V)`.
pub fn multi_head_attention(
    params: &MultiHeadParams,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> Result<MultiHeadOutput> {
    Ok(multi_head_forward(params, q, k, v, false)?.0)
}

pub(crate) fn multi_head_forward(
    params: &MultiHeadParams,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
) -> Result<(MultiHeadOutput, MultiHeadCache)> {
    params.validate(q, k, v)?;
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut caches = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let (m, c) = attention_forward(&q.matmul(&h.wq)?, &k.matmul(&h.wk)?, &v.matmul(&h.wv)?, causal)?;
        outs.push(m);
        caches.push(c);
    }
    let concat = Matrix::hstack(&outs)?;
    let output = concat.matmul(&params.output)?;
    let attention = caches.iter().map(|c| c.attention.clone()).collect();
    Ok((
        MultiHeadOutput { output, attention },
        MultiHeadCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            heads: caches,
            concat,
        },
    ))
}

/// Returns parameter gradients and `(dQ, dK, dV)`. `d_attention` holds an
/// optional extra gradient per head on the attention distributions.
pub(crate) fn multi_head_backward(
    params: &MultiHeadParams,
    cache: &MultiHeadCache,
    d_out: &Matrix,
    d_attention: Option<&[Matrix]>,
) -> Result<(MultiHeadParams, Matrix, Matrix, Matrix)> {
    let d_output = cache.concat.t_matmul(d_out)?;
    let d_concat = d_out.matmul_t(&params.output)?;
    let mut dq = Matrix::zeros(cache.q.rows(), cache.q.cols());
    let mut dk = Matrix::zeros(cache.k.rows(), cache.k.cols());
    let mut dv = Matrix::zeros(cache.v.rows(), cache.v.cols());
    let mut head_grads = Vec::with_capacity(params.heads.len());
    let mut start = 0;
    for (i, (h, c)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let width = h.wv.cols();
        let d_head = d_concat.columns(start, width);
        start += width;
        let extra = d_attention.map(|d| &d[i]);
        let (dqi, dki, dvi) = attention_backward(c, &d_head, extra)?;
        head_grads.push(HeadProjection {
            wq: cache.q.t_matmul(&dqi)?,
            wk: cache.k.t_matmul(&dki)?,
            wv: cache.v.t_matmul(&dvi)?,
        });
        dq.add_assign(&dqi.matmul_t(&h.wq)?)?;
        dk.add_assign(&dki.matmul_t(&h.wk)?)?;
        dv.add_assign(&dvi.matmul_t(&h.wv)?)?;
    }
    Ok((
        MultiHeadParams {
            heads: head_grads,
            output: d_output,
        },
        dq,
        dk,
        dv,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_copies_value() {
        let (out, a) = scaled_dot_attention(&m(&[&[0.3, -2.0], &[5.0, 1.0]]), &m(&[&[1.0, 1.0]]), &m(&[&[7.0, 8.0, 9.0]]))
            .unwrap();
        assert_eq!(a, m(&[&[1.0], &[1.0]]));
        assert_eq!(out.row(0), [7.0, 8.0, 9.0]);
        assert_eq!(out.row(1), [7.0, 8.0, 9.0]);
    }

    #[test]
    fn two_key_fixture() {
        // Oracle: weights exp(1/√2) and exp(0), normalized by hand.
        let e = (1.0 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let w1 = 1.0 / (e + 1.0);
        let (out, a) = scaled_dot_attention(
            &m(&[&[1.0, 0.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &m(&[&[1.0, 2.0], &[3.0, 4.0]]),
        )
        .unwrap();
        assert!((a[(0, 0)] - w0).abs() < 1e-15 && (a[(0, 1)] - w1).abs() < 1e-15);
        assert!((a[(0, 0)] - 0.6698).abs() < 5e-5 && (a[(0, 1)] - 0.3302).abs() < 5e-5);
        assert!((out[(0, 0)] - (w0 + 3.0 * w1)).abs() < 1e-14);
        assert!((out[(0, 0)] - 1.6604).abs() < 1e-4 && (out[(0, 1)] - 2.6604).abs() < 1e-4);
    }

    #[test]
    fn identical_keys_average_values() {
        let (out, a) = scaled_dot_attention(
            &m(&[&[0.9, -0.4]]),
            &m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]),
            &m(&[&[1.0], &[2.0], &[6.0]]),
        )
        .unwrap();
        for j in 0..3 {
            assert!((a[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out[(0, 0)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let q = Matrix::zeros(2, 3);
        assert!(scaled_dot_attention(&q, &Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
        assert!(scaled_dot_attention(&q, &Matrix::zeros(2, 3), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Matrix::uniform(3, 4, 1, &mut rng);
        let k = Matrix::uniform(5, 4, 1, &mut rng);
        let v = Matrix::uniform(5, 4, 1, &mut rng);
        let params = MultiHeadParams {
            heads: vec![HeadProjection {
                wq: Matrix::identity(4),
                wk: Matrix::identity(4),
                wv: Matrix::identity(4),
            }],
            output: Matrix::identity(4),
        };
        let mh = multi_head_attention(&params, &q, &k, &v).unwrap();
        let (single, a) = scaled_dot_attention(&q, &k, &v).unwrap();
        for (x, y) in mh.output.data().iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(mh.attention[0], a);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MultiHeadParams::new(4, 2, &mut rng).unwrap();
        let q = Matrix::uniform(3, 4, 1, &mut rng);
        let k = Matrix::uniform(3, 4, 1, &mut rng);
        let out = multi_head_attention(&params, &q, &k, &Matrix::zeros(3, 4)).unwrap();
        assert!(out.output.data().iter().all(|&x| x == 0.0));
    }

    /// Independent scalar-loop implementation of multi-head attention.
    fn naive_multi_head(p: &MultiHeadParams, q: &Matrix, k: &Matrix, v: &Matrix) -> Vec<Vec<f64>> {
        let proj = |x: &Matrix, w: &Matrix| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..w.cols())
                        .map(|j| (0..x.cols()).map(|t| x[(i, t)] * w[(t, j)]).sum())
                        .collect()
                })
                .collect()
        };
        let mut concat: Vec<Vec<f64>> = vec![Vec::new(); q.rows()];
        for h in &p.heads {
            let (qh, kh, vh) = (proj(q, &h.wq), proj(k, &h.wk), proj(v, &h.wv));
            let d = qh[0].len() as f64;
            for i in 0..q.rows() {
                let scores: Vec<f64> = kh
                    .iter()
                    .map(|kr| qh[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..vh[0].len() {
                    let val: f64 = scores.iter().zip(&vh).map(|(s, vr)| s.exp() / z * vr[c]).sum();
                    concat[i].push(val);
                }
            }
        }
        concat
            .iter()
            .map(|row| {
                (0..p.output.cols())
                    .map(|j| row.iter().enumerate().map(|(t, x)| x * p.output[(t, j)]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn multi_head_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let params = MultiHeadParams::new(4, 2, &mut rng).unwrap();
        let q = Matrix::uniform(3, 4, 1, &mut rng);
        let k = Matrix::uniform(3, 4, 1, &mut rng);
        let v = Matrix::uniform(3, 4, 1, &mut rng);
        let fast = multi_head_attention(&params, &q, &k, &v).unwrap();
        let slow = naive_multi_head(&params, &q, &k, &v);
        for i in 0..3 {
            for j in 0..4 {
                assert!((fast.output[(i, j)] - slow[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn causal_mask_hides_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::uniform(4, 3, 1, &mut rng);
        let (_, c) = attention_forward(&x, &x, &x, true).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(c.attention[(i, j)], 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(n in 1usize..6, m in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Matrix::uniform(n, d, 1, &mut rng).map(|x| x * 10.0);
            let k = Matrix::uniform(m, d, 1, &mut rng).map(|x| x * 10.0);
            let v = Matrix::uniform(m, 2, 1, &mut rng);
            let (_, a) = scaled_dot_attention(&q, &k, &v).unwrap();
            for i in 0..n {
                prop_assert!(a.row(i).iter().all(|&x| x >= 0.0));
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
