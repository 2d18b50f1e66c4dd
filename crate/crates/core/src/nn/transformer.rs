//! Post-norm transformer encoder and decoder layers.
//!
//! Every sublayer is wrapped as `LayerNorm(x + Sublayer(x))`.

use rand::Rng;

use super::attention::{multi_head_backward, multi_head_forward, MultiHeadCache, MultiHeadParams};
use super::layers::{FeedForward, FeedForwardCache, LayerNorm, LayerNormCache};
use super::params::{prefixed, Parameters};
use super::Matrix;
use crate::{Error, Result};

/// Sinusoidal positional encoding row for `pos`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Looks up `ids` in `table` and adds positional encodings.
pub fn embed(table: &Matrix, ids: &[usize]) -> Result<Matrix> {
    let d = table.cols();
    let mut x = Matrix::zeros(ids.len(), d);
    for (pos, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::dims("embed", format!("id {id} outside table of {}", table.rows())));
        }
        let pe = positional_encoding(pos, d);
        for ((o, e), p) in x.row_mut(pos).iter_mut().zip(table.row(id)).zip(pe) {
            *o = e + p;
        }
    }
    Ok(x)
}

/// Scatters `dx` rows back onto the embedding gradient.
pub fn embed_backward(grad_table: &mut Matrix, ids: &[usize], dx: &Matrix) {
    for (pos, &id) in ids.iter().enumerate() {
        for (g, d) in grad_table.row_mut(id).iter_mut().zip(dx.row(pos)) {
            *g += d;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

pub struct EncoderLayerCache {
    attn: MultiHeadCache,
    norm1: LayerNormCache,
    ffn: FeedForwardCache,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng>(d_model: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadParams::new(d_model, heads, rng)?,
            norm1: LayerNorm::new(d_model),
            ffn: FeedForward::new(d_model, hidden, rng),
            norm2: LayerNorm::new(d_model),
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, EncoderLayerCache)> {
        let (sa, attn) = multi_head_forward(&self.self_attn, x, x, x, false)?;
        let (h, norm1) = self.norm1.forward_cached(&x.add(&sa.output)?)?;
        let (f, ffn) = self.ffn.forward_cached(&h)?;
        let (y, norm2) = self.norm2.forward_cached(&h.add(&f)?)?;
        Ok((
            y,
            EncoderLayerCache {
                attn,
                norm1,
                ffn,
                norm2,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderLayerCache, dy: &Matrix) -> Result<(EncoderLayer, Matrix)> {
        let (norm2, dr2) = self.norm2.backward(&cache.norm2, dy)?;
        let (ffn, mut dh) = self.ffn.backward(&cache.ffn, &dr2)?;
        dh.add_assign(&dr2)?;
        let (norm1, dr1) = self.norm1.backward(&cache.norm1, &dh)?;
        let (self_attn, dq, dk, dv) = multi_head_backward(&self.self_attn, &cache.attn, &dr1, None)?;
        let mut dx = dr1;
        dx.add_assign(&dq)?;
        dx.add_assign(&dk)?;
        dx.add_assign(&dv)?;
        Ok((
            EncoderLayer {
                self_attn,
                norm1,
                ffn,
                norm2,
            },
            dx,
        ))
    }
}

impl Parameters for EncoderLayer {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("self_attn", self.self_attn.tensors())
            .chain(prefixed("norm1", self.norm1.tensors()))
            .chain(prefixed("ffn", self.ffn.tensors()))
            .chain(prefixed("norm2", self.norm2.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.self_attn.tensors_mut();
        v.extend(self.norm1.tensors_mut());
        v.extend(self.ffn.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadParams,
    pub norm1: LayerNorm,
    pub context_attn: MultiHeadParams,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Forward results of one decoder layer.
pub struct DecoderLayerOutput {
    /// Layer output, fed to the next layer or the vocabulary projection.
    pub output: Matrix,
    /// Masked self-attention sublayer output (rows `q_t`).
    pub self_out: Matrix,
    /// Context-attention sublayer output before the feed-forward (rows `o_t`).
    pub context_out: Matrix,
    /// Per-head context attention over source positions.
    pub context_attention: Vec<Matrix>,
}

pub struct DecoderLayerCache {
    self_attn: MultiHeadCache,
    norm1: LayerNormCache,
    context_attn: MultiHeadCache,
    norm2: LayerNormCache,
    ffn: FeedForwardCache,
    norm3: LayerNormCache,
}

/// Extra upstream gradients entering a decoder layer's internals.
#[derive(Default)]
pub struct DecoderTaps<'a> {
    pub d_self_out: Option<&'a Matrix>,
    pub d_context_out: Option<&'a Matrix>,
    pub d_context_attention: Option<&'a [Matrix]>,
}

impl DecoderLayer {
    pub fn new<R: Rng>(d_model: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadParams::new(d_model, heads, rng)?,
            norm1: LayerNorm::new(d_model),
            context_attn: MultiHeadParams::new(d_model, heads, rng)?,
            norm2: LayerNorm::new(d_model),
            ffn: FeedForward::new(d_model, hidden, rng),
            norm3: LayerNorm::new(d_model),
        })
    }

    pub fn forward_cached(&self, y: &Matrix, memory: &Matrix) -> Result<(DecoderLayerOutput, DecoderLayerCache)> {
        let (sa, self_attn) = multi_head_forward(&self.self_attn, y, y, y, true)?;
        let (q, norm1) = self.norm1.forward_cached(&y.add(&sa.output)?)?;
        let (ca, context_attn) = multi_head_forward(&self.context_attn, &q, memory, memory, false)?;
        let (o, norm2) = self.norm2.forward_cached(&q.add(&ca.output)?)?;
        let (f, ffn) = self.ffn.forward_cached(&o)?;
        let (z, norm3) = self.norm3.forward_cached(&o.add(&f)?)?;
        Ok((
            DecoderLayerOutput {
                output: z,
                self_out: q,
                context_out: o,
                context_attention: ca.attention,
            },
            DecoderLayerCache {
                self_attn,
                norm1,
                context_attn,
                norm2,
                ffn,
                norm3,
            },
        ))
    }

    /// Returns parameter gradients, `dL/dy` and `dL/dmemory`.
    pub fn backward(
        &self,
        cache: &DecoderLayerCache,
        dz: &Matrix,
        taps: DecoderTaps<'_>,
    ) -> Result<(DecoderLayer, Matrix, Matrix)> {
        let (norm3, dr3) = self.norm3.backward(&cache.norm3, dz)?;
        let (ffn, mut d_o) = self.ffn.backward(&cache.ffn, &dr3)?;
        d_o.add_assign(&dr3)?;
        if let Some(extra) = taps.d_context_out {
            d_o.add_assign(extra)?;
        }
        let (norm2, dr2) = self.norm2.backward(&cache.norm2, &d_o)?;
        let (context_attn, dq_c, dk_c, dv_c) =
            multi_head_backward(&self.context_attn, &cache.context_attn, &dr2, taps.d_context_attention)?;
        let mut d_q = dr2;
        d_q.add_assign(&dq_c)?;
        if let Some(extra) = taps.d_self_out {
            d_q.add_assign(extra)?;
        }
        let mut d_memory = dk_c;
        d_memory.add_assign(&dv_c)?;
        let (norm1, dr1) = self.norm1.backward(&cache.norm1, &d_q)?;
        let (self_attn, dq, dk, dv) = multi_head_backward(&self.self_attn, &cache.self_attn, &dr1, None)?;
        let mut dy = dr1;
        dy.add_assign(&dq)?;
        dy.add_assign(&dk)?;
        dy.add_assign(&dv)?;
        Ok((
            DecoderLayer {
                self_attn,
                norm1,
                context_attn,
                norm2,
                ffn,
                norm3,
            },
            dy,
            d_memory,
        ))
    }
}

impl Parameters for DecoderLayer {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("self_attn", self.self_attn.tensors())
            .chain(prefixed("norm1", self.norm1.tensors()))
            .chain(prefixed("context_attn", self.context_attn.tensors()))
            .chain(prefixed("norm2", self.norm2.tensors()))
            .chain(prefixed("ffn", self.ffn.tensors()))
            .chain(prefixed("norm3", self.norm3.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.self_attn.tensors_mut();
        v.extend(self.norm1.tensors_mut());
        v.extend(self.context_attn.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v.extend(self.ffn.tensors_mut());
        v.extend(self.norm3.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(0, 4);
        assert_eq!(pe, [0.0, 1.0, 0.0, 1.0]);
        let pe = positional_encoding(1, 2);
        assert!((pe[0] - 1f64.sin()).abs() < 1e-15 && (pe[1] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let table = Matrix::zeros(3, 2);
        assert!(embed(&table, &[0, 3]).is_err());
    }
}
