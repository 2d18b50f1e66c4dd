//! Transformer encoder-decoder with a pointer-generator output head.
//!
//! At decoder step `t` the head mixes a vocabulary distribution with the
//! context-attention distribution over source positions:
//!
//! ```text
//! p_gen   = σ(w_tᵀ·o_t + w_qᵀ·q_t + b)
//! p_final = p_gen·P_vocab(w) + (1 − p_gen)·Σ_{i: src_i = w} A_t,i
//! ```
//!
//! `q_t` is row `t` of the last decoder layer's masked self-attention
//! sublayer, `o_t` row `t` of its context-attention sublayer (before the
//! feed-forward) and `A_t` the head-averaged context attention. `p_final`
//! lives on the extended vocabulary, so source OOV tokens can be copied.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, encode_extended, is_cjk, tokenize, EncodedSequence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::ops::{sigmoid, softmax, softmax_backward};
use crate::nn::optim::clip_global_norm;
use crate::nn::params::{prefixed, Parameters};
use crate::nn::transformer::{embed, embed_backward, DecoderLayer, DecoderLayerCache, DecoderTaps, EncoderLayer, EncoderLayerCache};
use crate::nn::{Adam, Linear, Matrix, Optimizer};
use crate::{Error, Result};

pub const MODEL_KIND: &str = "generator";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Longest supported decoder prefix; sources are truncated to it too.
    pub max_positions: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 32,
            heads: 2,
            ffn_hidden: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorHyper {
    pub model: GeneratorConfig,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for GeneratorHyper {
    fn default() -> Self {
        GeneratorHyper {
            model: GeneratorConfig::default(),
            epochs: 40,
            lr: 0.003,
            clip_norm: 5.0,
            seed: 13,
            min_freq: 2,
            max_vocab: 8000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_width: 4,
            max_len: 16,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.beam_width == 0 {
            return Err(Error::Config("max_len and beam_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Shared by encoder and decoder inputs.
    pub embedding: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub projection: Linear,
    pub w_t: Matrix,
    pub w_q: Matrix,
    pub b: Matrix,
}

impl Parameters for GeneratorParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(prefixed("encoder", self.encoder.tensors()));
        v.extend(prefixed("decoder", self.decoder.tensors()));
        v.extend(prefixed("projection", self.projection.tensors()));
        v.push(("w_t".into(), &self.w_t));
        v.push(("w_q".into(), &self.w_q));
        v.push(("b".into(), &self.b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.encoder.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v.extend(self.projection.tensors_mut());
        v.push(&mut self.w_t);
        v.push(&mut self.w_q);
        v.push(&mut self.b);
        v
    }
}

/// Everything the pointer-generator head computes at one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStepState {
    pub o_t: Vec<f64>,
    pub q_t: Vec<f64>,
    /// Head-averaged context attention over source positions.
    pub a_t: Vec<f64>,
    pub p_vocab: Vec<f64>,
    pub p_gen: f64,
    /// Over the extended vocabulary, `d^v + |oov_list|` entries.
    pub p_final: Vec<f64>,
}

/// `p_gen·P_vocab(w) + (1 − p_gen)·Σ_{i: src_i = w} A_t,i` over the
/// extended vocabulary of `source`.
pub fn final_distribution(p_gen: f64, p_vocab: &[f64], a_t: &[f64], source: &EncodedSequence) -> Vec<f64> {
    let mut out = vec![0.0; p_vocab.len() + source.oov_list.len()];
    for (o, p) in out.iter_mut().zip(p_vocab) {
        *o = p_gen * p;
    }
    for (&id, &a) in source.extended_ids.iter().zip(a_t) {
        out[id] += (1.0 - p_gen) * a;
    }
    out
}

struct EncoderPass {
    states: Matrix,
    caches: Vec<EncoderLayerCache>,
}

struct DecoderPass {
    output: Matrix,
    self_out: Matrix,
    context_out: Matrix,
    context_attention: Vec<Matrix>,
    caches: Vec<DecoderLayerCache>,
}

impl GeneratorParams {
    pub fn init(config: &GeneratorConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embedding = Matrix::uniform(vocab_size, d, 1, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayer::new(d, config.heads, config.ffn_hidden, &mut rng))
            .collect::<Result<_>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer::new(d, config.heads, config.ffn_hidden, &mut rng))
            .collect::<Result<_>>()?;
        if config.decoder_layers == 0 {
            return Err(Error::Config("generator needs at least one decoder layer".into()));
        }
        Ok(GeneratorParams {
            embedding,
            encoder,
            decoder,
            projection: Linear::new(d, vocab_size, &mut rng),
            w_t: Matrix::uniform(1, d, d, &mut rng),
            w_q: Matrix::uniform(1, d, d, &mut rng),
            b: Matrix::zeros(1, 1),
        })
    }

    fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    fn encode_pass(&self, ids: &[usize]) -> Result<EncoderPass> {
        if ids.is_empty() {
            return Err(Error::EmptySource);
        }
        let mut x = embed(&self.embedding, ids)?;
        let mut caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, c) = layer.forward_cached(&x)?;
            caches.push(c);
            x = y;
        }
        Ok(EncoderPass { states: x, caches })
    }

    fn decode_pass(&self, memory: &Matrix, inputs: &[usize]) -> Result<DecoderPass> {
        let mut y = embed(&self.embedding, inputs)?;
        let mut caches = Vec::with_capacity(self.decoder.len());
        let mut last = None;
        for layer in &self.decoder {
            let (out, c) = layer.forward_cached(&y, memory)?;
            caches.push(c);
            y = out.output.clone();
            last = Some(out);
        }
        let last = last.expect("at least one decoder layer");
        Ok(DecoderPass {
            output: last.output,
            self_out: last.self_out,
            context_out: last.context_out,
            context_attention: last.context_attention,
            caches,
        })
    }

    fn step_state(&self, pass: &DecoderPass, t: usize, logits_row: &[f64], source: &EncodedSequence) -> Result<DecoderStepState> {
        let o_t = pass.context_out.row(t).to_vec();
        let q_t = pass.self_out.row(t).to_vec();
        let heads = pass.context_attention.len() as f64;
        let mut a_t = vec![0.0; source.len()];
        for a in &pass.context_attention {
            for (m, v) in a_t.iter_mut().zip(a.row(t)) {
                *m += v / heads;
            }
        }
        let p_vocab = softmax(logits_row)?;
        let s = crate::nn::matrix::dot(self.w_t.row(0), &o_t) + crate::nn::matrix::dot(self.w_q.row(0), &q_t) + self.b[(0, 0)];
        let p_gen = sigmoid(s);
        let p_final = final_distribution(p_gen, &p_vocab, &a_t, source);
        Ok(DecoderStepState {
            o_t,
            q_t,
            a_t,
            p_vocab,
            p_gen,
            p_final,
        })
    }

    /// Teacher-forced mean token NLL of `targets` (extended ids, EOS last)
    /// given decoder `inputs` (BOS-led base ids).
    pub fn nll(&self, source: &EncodedSequence, inputs: &[usize], targets: &[usize]) -> Result<f64> {
        let enc = self.encode_pass(&source.ids)?;
        let dec = self.decode_pass(&enc.states, inputs)?;
        let logits = self.projection.forward(&dec.output)?;
        let mut total = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let step = self.step_state(&dec, t, logits.row(t), source)?;
            total -= step.p_final[y].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / targets.len() as f64)
    }

    /// Mean token NLL and its gradient with respect to every parameter,
    /// including the pointer parameters `w_t`, `w_q` and `b`.
    pub fn nll_and_grad(&self, source: &EncodedSequence, inputs: &[usize], targets: &[usize]) -> Result<(f64, GeneratorParams)> {
        if inputs.len() != targets.len() || targets.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let n_steps = targets.len();
        let scale = 1.0 / n_steps as f64;
        let enc = self.encode_pass(&source.ids)?;
        let dec = self.decode_pass(&enc.states, inputs)?;
        let logits = self.projection.forward(&dec.output)?;
        let d = self.embedding.cols();
        let v = self.vocab_size();
        let heads = dec.context_attention.len();

        let mut grads = self.zeros_like();
        let mut d_logits = Matrix::zeros(n_steps, v);
        let mut d_self_out = Matrix::zeros(n_steps, d);
        let mut d_context_out = Matrix::zeros(n_steps, d);
        let mut d_attn: Vec<Matrix> = (0..heads).map(|_| Matrix::zeros(n_steps, source.len())).collect();
        let mut total = 0.0;

        for (t, &y) in targets.iter().enumerate() {
            let step = self.step_state(&dec, t, logits.row(t), source)?;
            let g = step.p_gen;
            let p = step.p_final[y].max(f64::MIN_POSITIVE);
            total -= p.ln();
            let dp = -scale / p;

            let p_voc_y = if y < v { step.p_vocab[y] } else { 0.0 };
            let copy_y: f64 = source
                .extended_ids
                .iter()
                .zip(&step.a_t)
                .filter(|(&id, _)| id == y)
                .map(|(_, a)| a)
                .sum();

            if y < v {
                let mut dpv = vec![0.0; v];
                dpv[y] = dp * g;
                d_logits.row_mut(t).copy_from_slice(&softmax_backward(&step.p_vocab, &dpv));
            }

            let ds = dp * (p_voc_y - copy_y) * g * (1.0 - g);
            grads.b[(0, 0)] += ds;
            for j in 0..d {
                grads.w_t[(0, j)] += ds * step.o_t[j];
                grads.w_q[(0, j)] += ds * step.q_t[j];
                d_context_out[(t, j)] += ds * self.w_t[(0, j)];
                d_self_out[(t, j)] += ds * self.w_q[(0, j)];
            }

            let da = dp * (1.0 - g) / heads as f64;
            for (i, &id) in source.extended_ids.iter().enumerate() {
                if id == y {
                    for h in d_attn.iter_mut() {
                        h[(t, i)] += da;
                    }
                }
            }
        }

        let (projection, mut dz) = self.projection.backward(&dec.output, &d_logits)?;
        grads.projection = projection;

        let mut d_memory = Matrix::zeros(enc.states.rows(), d);
        let last = self.decoder.len() - 1;
        for li in (0..self.decoder.len()).rev() {
            let taps = if li == last {
                DecoderTaps {
                    d_self_out: Some(&d_self_out),
                    d_context_out: Some(&d_context_out),
                    d_context_attention: Some(&d_attn),
                }
            } else {
                DecoderTaps::default()
            };
            let (g, dy, dm) = self.decoder[li].backward(&dec.caches[li], &dz, taps)?;
            grads.decoder[li] = g;
            d_memory.add_assign(&dm)?;
            dz = dy;
        }
        embed_backward(&mut grads.embedding, inputs, &dz);

        let mut dx = d_memory;
        for li in (0..self.encoder.len()).rev() {
            let (g, dprev) = self.encoder[li].backward(&enc.caches[li], &dx)?;
            grads.encoder[li] = g;
            dx = dprev;
        }
        embed_backward(&mut grads.embedding, &source.ids, &dx);

        Ok((total * scale, grads))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub epochs: usize,
    pub seed: u64,
    /// Mean token NLL per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub params: GeneratorParams,
    pub meta: GeneratorMeta,
}

/// A training pair prepared for teacher forcing.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub source: EncodedSequence,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let params = GeneratorParams::init(&config, vocab.len(), seed)?;
        Ok(GeneratorModel {
            config,
            vocab,
            params,
            meta: GeneratorMeta {
                seed,
                ..GeneratorMeta::default()
            },
        })
    }

    /// Tokenizes and truncates a source text, then encodes it against the
    /// extended vocabulary.
    pub fn encode_source(&self, text: &str) -> Result<EncodedSequence> {
        let tokens: Vec<String> = tokenize(text).into_iter().take(self.config.max_positions).collect();
        if tokens.is_empty() {
            return Err(Error::EmptySource);
        }
        Ok(encode_extended(&self.vocab, &tokens))
    }

    pub fn prepare_pair(&self, source: &str, target: &str) -> Result<PreparedPair> {
        let source = self.encode_source(source)?;
        let target_tokens: Vec<String> = tokenize(target)
            .into_iter()
            .take(self.config.max_positions - 1)
            .collect();
        if target_tokens.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let mut targets: Vec<usize> = target_tokens.iter().map(|t| source.target_id(&self.vocab, t)).collect();
        let mut inputs = vec![BOS];
        inputs.extend(targets.iter().map(|&id| base_id(&self.vocab, id)));
        targets.push(EOS);
        Ok(PreparedPair {
            source,
            inputs,
            targets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_params(
            MODEL_KIND,
            serde_json::to_value(self.config)?,
            self.vocab.tokens().to_vec(),
            &self.params,
            serde_json::to_value(&self.meta)?,
        )
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(path, MODEL_KIND)?;
        let config: GeneratorConfig = serde_json::from_value(ckpt.config.clone())?;
        let vocab = Vocabulary::from_full_list(ckpt.vocab.clone())?;
        let mut params = GeneratorParams::init(&config, vocab.len(), 0)?;
        ckpt.load_into(&mut params)?;
        let meta = serde_json::from_value(ckpt.metadata).unwrap_or_default();
        Ok(GeneratorModel {
            config,
            vocab,
            params,
            meta,
        })
    }
}

/// Extended ids are fed back to the decoder as UNK.
fn base_id(vocab: &Vocabulary, id: usize) -> usize {
    if id < vocab.len() {
        id
    } else {
        UNK
    }
}

/// Encoder states, one row per source token.
pub fn encode(model: &GeneratorModel, source: &EncodedSequence) -> Result<Matrix> {
    Ok(model.params.encode_pass(&source.ids)?.states)
}

/// Runs the decoder over `prefix` (BOS first, base ids) and returns the
/// head state for its last position.
pub fn decode_step(
    model: &GeneratorModel,
    encoder_states: &Matrix,
    prefix: &[usize],
    source: &EncodedSequence,
) -> Result<DecoderStepState> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::InvalidPrefix("prefix must begin with BOS".into()));
    }
    if prefix.len() > model.config.max_positions {
        return Err(Error::PrefixTooLong {
            len: prefix.len(),
            max: model.config.max_positions,
        });
    }
    if encoder_states.rows() != source.len() {
        return Err(Error::dims("decode_step", "encoder states do not match the source length"));
    }
    let inputs: Vec<usize> = prefix.iter().map(|&id| base_id(&model.vocab, id)).collect();
    let pass = model.params.decode_pass(encoder_states, &inputs)?;
    let t = inputs.len() - 1;
    let last = Matrix::row_vector(pass.output.row(t));
    let logits = model.params.projection.forward(&last)?;
    model.params.step_state(&pass, t, logits.row(0), source)
}

/// Ids never emitted during decoding.
fn emittable(id: usize) -> bool {
    !matches!(id, PAD | UNK | BOS)
}

fn greedy_ids(model: &GeneratorModel, states: &Matrix, source: &EncodedSequence, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len && prefix.len() < model.config.max_positions {
        let step = decode_step(model, states, &prefix, source)?;
        let next = argmax_emittable(&step.p_final);
        if next == EOS {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

fn argmax_emittable(p: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &v) in p.iter().enumerate() {
        if emittable(id) && v > best_p {
            best = id;
            best_p = v;
        }
    }
    best
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

fn length_normalized(h: &Hypothesis, alpha: f64) -> f64 {
    let len = h.ids.len().max(1) as f64;
    h.log_prob / ((5.0 + len) / 6.0).powf(alpha)
}

fn beam_ids(model: &GeneratorModel, states: &Matrix, source: &EncodedSequence, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let width = cfg.beam_width;
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if alive.is_empty() || alive[0].ids.len() + 1 >= model.config.max_positions {
            break;
        }
        let mut expansions = Vec::new();
        for h in &alive {
            let mut prefix = vec![BOS];
            prefix.extend(&h.ids);
            let step = decode_step(model, states, &prefix, source)?;
            let mut ranked: Vec<usize> = (0..step.p_final.len()).filter(|&id| emittable(id)).collect();
            ranked.sort_by(|&a, &b| step.p_final[b].total_cmp(&step.p_final[a]));
            for &id in ranked.iter().take(width) {
                let mut ids = h.ids.clone();
                let is_eos = id == EOS;
                if !is_eos {
                    ids.push(id);
                }
                expansions.push(Hypothesis {
                    ids,
                    log_prob: h.log_prob + step.p_final[id].max(f64::MIN_POSITIVE).ln(),
                    finished: is_eos,
                });
            }
        }
        expansions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        expansions.truncate(width);
        alive.clear();
        for h in expansions {
            if h.finished {
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
        if finished.len() >= width {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            length_normalized(a, cfg.length_penalty)
                .total_cmp(&length_normalized(b, cfg.length_penalty))
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h.ids.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Decodes `source` into extended-vocabulary token strings.
pub fn generate_tokens(model: &GeneratorModel, source: &str, cfg: &DecodeConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let seq = model.encode_source(source)?;
    let states = encode(model, &seq)?;
    let ids = match cfg.mode {
        DecodeMode::Greedy => greedy_ids(model, &states, &seq, cfg.max_len)?,
        DecodeMode::Beam => beam_ids(model, &states, &seq, cfg)?,
    };
    Ok(ids
        .into_iter()
        .filter_map(|id| seq.render(&model.vocab, id))
        .collect())
}

pub fn generate(model: &GeneratorModel, source: &str, cfg: &DecodeConfig) -> Result<String> {
    Ok(detokenize(&generate_tokens(model, source, cfg)?))
}

/// Joins tokens with spaces, except between adjacent CJK characters.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut prev_cjk = false;
    for tok in tokens {
        let cjk = tok.chars().count() == 1 && tok.chars().all(is_cjk);
        if !out.is_empty() && !(cjk && prev_cjk) {
            out.push(' ');
        }
        out.push_str(tok);
        prev_cjk = cjk;
    }
    out
}

/// Trains a pointer-generator on `(source, target)` text pairs with
/// teacher-forced NLL. Deterministic for a fixed seed.
pub fn train_generator<S: AsRef<str>, T: AsRef<str>>(pairs: &[(S, T)], hyper: &GeneratorHyper) -> Result<GeneratorModel> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair set".into()));
    }
    let vocab = build_vocab(
        pairs.iter().flat_map(|(s, t)| [s.as_ref(), t.as_ref()]),
        hyper.min_freq,
        hyper.max_vocab,
    )?;
    let mut model = GeneratorModel::new(hyper.model, vocab, hyper.seed)?;
    let prepared = pairs
        .iter()
        .map(|(s, t)| model.prepare_pair(s.as_ref(), t.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    continue_training(&mut model, &prepared, hyper)?;
    Ok(model)
}

/// Further epochs of Adam over prepared pairs.
pub fn continue_training(model: &mut GeneratorModel, pairs: &[PreparedPair], hyper: &GeneratorHyper) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(hyper.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let p = &pairs[i];
            let (loss, mut grads) = model.params.nll_and_grad(&p.source, &p.inputs, &p.targets)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!("generator training diverged at epoch {epoch}")));
            }
            clip_global_norm(&mut grads, hyper.clip_norm);
            opt.step(&mut model.params, &grads)?;
            total += loss;
        }
        let mean = total / pairs.len() as f64;
        log::debug!("generator epoch {epoch}: nll {mean:.5}");
        history.push(mean);
    }
    model.meta.epochs += hyper.epochs;
    model.meta.loss_history.extend(&history);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn toy_model(seed: u64) -> GeneratorModel {
        let vocab = build_vocab(["a b c d e easy install"], 1, 100).unwrap();
        let config = GeneratorConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 16,
        };
        GeneratorModel::new(config, vocab, seed).unwrap()
    }

    #[test]
    fn final_distribution_fixture() {
        // vocab {a, b, c}; source [a, OOV d]
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let source = encode_extended(&vocab, &["a", "d"]);
        let mut p_vocab = vec![0.0; vocab.len()];
        p_vocab[4] = 0.5;
        p_vocab[5] = 0.3;
        p_vocab[6] = 0.2;
        let p = final_distribution(0.6, &p_vocab, &[0.4, 0.6], &source);
        let expected = [(4, 0.46), (5, 0.18), (6, 0.12), (7, 0.24)];
        for (id, v) in expected {
            assert!((p[id] - v).abs() < 1e-12, "{id}: {}", p[id]);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let pure = final_distribution(1.0, &p_vocab, &[0.4, 0.6], &source);
        assert_eq!(&pure[..vocab.len()], &p_vocab[..]);
        assert_eq!(pure[7], 0.0);

        let repeated = encode_extended(&vocab, &["a", "a"]);
        let p = final_distribution(0.0, &p_vocab, &[0.3, 0.7], &repeated);
        assert!((p[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = toy_model(1);
        let src = model.encode_source("a b zyxo c").unwrap();
        let s1 = encode(&model, &src).unwrap();
        assert_eq!(s1.shape(), (4, 8));
        assert_eq!(s1, encode(&model, &src).unwrap());
        assert!(matches!(encode(&model, &EncodedSequence::default()), Err(Error::EmptySource)));
    }

    #[test]
    fn pointer_bias_controls_p_gen() {
        let mut model = toy_model(2);
        model.params.w_t.fill(0.0);
        model.params.w_q.fill(0.0);
        let src = model.encode_source("a zyxo b").unwrap();
        let states = encode(&model, &src).unwrap();

        let step = decode_step(&model, &states, &[BOS], &src).unwrap();
        assert_eq!(step.p_gen, 0.5);

        model.params.b[(0, 0)] = 3f64.ln();
        let step = decode_step(&model, &states, &[BOS, 4], &src).unwrap();
        assert!((step.p_gen - 0.75).abs() < 1e-15);

        model.params.b[(0, 0)] = -100.0;
        let step = decode_step(&model, &states, &[BOS], &src).unwrap();
        assert!(step.p_gen < 1e-40);
        let mut copy = vec![0.0; step.p_final.len()];
        for (&id, &a) in src.extended_ids.iter().zip(&step.a_t) {
            copy[id] += a;
        }
        for (p, c) in step.p_final.iter().zip(&copy) {
            assert!((p - c).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_step_validates_prefix() {
        let model = toy_model(3);
        let src = model.encode_source("a b").unwrap();
        let states = encode(&model, &src).unwrap();
        assert!(matches!(decode_step(&model, &states, &[4], &src), Err(Error::InvalidPrefix(_))));
        let long = vec![BOS; 17];
        assert!(matches!(decode_step(&model, &states, &long, &src), Err(Error::PrefixTooLong { .. })));
    }

    #[test]
    fn nll_gradient_passes_grad_check() {
        let model = toy_model(4);
        let pair = model.prepare_pair("easy a zyxo b install c", "easy zyxo install").unwrap();
        let (loss, grads) = model.params.nll_and_grad(&pair.source, &pair.inputs, &pair.targets).unwrap();
        assert!((loss - model.params.nll(&pair.source, &pair.inputs, &pair.targets).unwrap()).abs() < 1e-12);
        let report = grad_check(
            |p: &GeneratorParams| p.nll(&pair.source, &pair.inputs, &pair.targets),
            &model.params,
            &grads,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pair_errors() {
        let empty: [(&str, &str); 0] = [];
        assert!(train_generator(&empty, &GeneratorHyper::default()).is_err());
        let bad = [("a b c", " ")];
        assert!(matches!(train_generator(&bad, &GeneratorHyper::default()), Err(Error::EmptyTarget)));
    }

    #[test]
    fn oov_target_trains_with_finite_loss() {
        let hyper = GeneratorHyper {
            model: GeneratorConfig {
                d_model: 8,
                ffn_hidden: 16,
                ..GeneratorConfig::default()
            },
            epochs: 30,
            lr: 0.01,
            min_freq: 3,
            ..GeneratorHyper::default()
        };
        let pairs = [("great zyxo here", "zyxo"), ("great qwop here", "qwop"), ("great stuff here", "great")];
        let model = train_generator(&pairs, &hyper).unwrap();
        assert!(!model.vocab.contains("zyxo"));
        let h = &model.meta.loss_history;
        assert!(h.iter().all(|l| l.is_finite()));
        assert!(h.last().unwrap() < h.first().unwrap());
    }

    #[test]
    fn max_len_bounds_output() {
        let model = toy_model(5);
        let cfg = DecodeConfig {
            max_len: 1,
            ..DecodeConfig::default()
        };
        assert!(generate_tokens(&model, "a b c", &cfg).unwrap().len() <= 1);
        let beam = DecodeConfig {
            mode: DecodeMode::Beam,
            ..cfg
        };
        assert!(generate_tokens(&model, "a b c", &beam).unwrap().len() <= 1);
        assert!(generate(&model, "  ", &cfg).is_err());
    }

    #[test]
    fn width_one_beam_equals_greedy_on_random_models() {
        for seed in 0..8 {
            let model = toy_model(seed);
            for src in ["a b zyxo", "easy install c d", "e"] {
                let greedy = generate_tokens(&model, src, &DecodeConfig::default()).unwrap();
                let beam = generate_tokens(
                    &model,
                    src,
                    &DecodeConfig {
                        mode: DecodeMode::Beam,
                        beam_width: 1,
                        ..DecodeConfig::default()
                    },
                )
                .unwrap();
                assert_eq!(greedy, beam, "seed {seed} source {src:?}");
            }
        }
    }

    #[test]
    fn detokenize_joins_cjk_tightly() {
        let toks: Vec<String> = ["好", "用", "usb", "接"].iter().map(|s| s.to_string()).collect();
        assert_eq!(detokenize(&toks), "好用 usb 接");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = toy_model(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        model.save(&path).unwrap();
        assert_eq!(GeneratorModel::load(&path).unwrap(), model);
    }
}
