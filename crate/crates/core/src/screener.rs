//! Transformer-encoder classifier producing `{p_pos, p_neg}` for a text.
//!
//! Embedding + sinusoidal positions → encoder layers → mean pool over token
//! states → linear head with two logits → softmax. Class 0 is "good selling
//! point".

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, tokenize, CandidateSentence, Vocabulary};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::ops::{cross_entropy, softmax};
use crate::nn::params::{prefixed, Parameters};
use crate::nn::transformer::{embed, embed_backward, EncoderLayer};
use crate::nn::{Linear, Matrix, Optimizer, Sgd};
use crate::{Error, Result};

pub const MODEL_KIND: &str = "screener";
const POSITIVE: usize = 0;
const NEGATIVE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    /// Longer inputs are truncated to this many tokens.
    pub max_tokens: usize,
}

impl Default for ScreenerConfig {
    fn default() -> Self {
        ScreenerConfig {
            d_model: 32,
            heads: 2,
            ffn_hidden: 64,
            layers: 1,
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenerHyper {
    pub model: ScreenerConfig,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for ScreenerHyper {
    fn default() -> Self {
        ScreenerHyper {
            model: ScreenerConfig::default(),
            epochs: 30,
            lr: 0.05,
            seed: 7,
            min_freq: 2,
            max_vocab: 8000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenerParams {
    pub embedding: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl Parameters for ScreenerParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(prefixed("layers", self.layers.tensors()));
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.layers.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

impl ScreenerParams {
    pub fn init(config: &ScreenerConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // One-hot rows have a single active input, so embedding fan-in is 1.
        let embedding = Matrix::uniform(vocab_size, config.d_model, 1, &mut rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(config.d_model, config.heads, config.ffn_hidden, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(config.d_model, 2, &mut rng);
        Ok(ScreenerParams {
            embedding,
            layers,
            head,
        })
    }

    fn logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut x = embed(&self.embedding, ids)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let mut pooled = x.sum_rows();
        pooled.scale(1.0 / ids.len() as f64);
        Ok(self.head.forward(&pooled)?.into_data())
    }

    /// Cross-entropy against `label` and its gradient.
    pub fn loss_and_grad(&self, ids: &[usize], label: usize) -> Result<(f64, ScreenerParams)> {
        let x0 = embed(&self.embedding, ids)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = x0;
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&x)?;
            caches.push(c);
            x = y;
        }
        let n = ids.len() as f64;
        let mut pooled = x.sum_rows();
        pooled.scale(1.0 / n);
        let logits = self.head.forward(&pooled)?;
        let (loss, dlogits) = cross_entropy(logits.row(0), label)?;
        let (head, dpooled) = self.head.backward(&pooled, &Matrix::row_vector(&dlogits))?;

        let mut dx = Matrix::zeros(ids.len(), self.embedding.cols());
        for i in 0..ids.len() {
            for (d, g) in dx.row_mut(i).iter_mut().zip(dpooled.row(0)) {
                *d = g / n;
            }
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            let (g, dprev) = layer.backward(cache, &dx)?;
            layer_grads.push(g);
            dx = dprev;
        }
        layer_grads.reverse();
        let mut embedding = Matrix::zeros(self.embedding.rows(), self.embedding.cols());
        embed_backward(&mut embedding, ids, &dx);
        Ok((
            loss,
            ScreenerParams {
                embedding,
                layers: layer_grads,
                head,
            },
        ))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    /// Mean training loss per epoch, across all training and fine-tuning.
    pub loss_history: Vec<f64>,
    pub fine_tune_calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenerModel {
    pub config: ScreenerConfig,
    pub vocab: Vocabulary,
    pub params: ScreenerParams,
    pub meta: TrainingMeta,
}

/// Anything that carries candidate text.
pub trait HasText {
    fn text(&self) -> &str;
}

impl HasText for String {
    fn text(&self) -> &str {
        self
    }
}

impl HasText for &str {
    fn text(&self) -> &str {
        self
    }
}

impl HasText for CandidateSentence {
    fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate<C> {
    pub candidate: C,
    /// `p_pos`
    pub score: f64,
    /// Position in the ranked input.
    pub index: usize,
}

impl ScreenerModel {
    pub fn new(config: ScreenerConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let params = ScreenerParams::init(&config, vocab.len(), seed)?;
        Ok(ScreenerModel {
            config,
            vocab,
            params,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    /// Token ids for `text`, truncated; `None` if nothing tokenizes.
    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .take(self.config.max_tokens)
            .map(|t| self.vocab.id_or_unk(t))
            .collect();
        (!ids.is_empty()).then_some(ids)
    }

    /// `[p_pos, p_neg]`
    pub fn probabilities(&self, text: &str) -> Result<[f64; 2]> {
        let ids = self
            .encode(text)
            .ok_or_else(|| Error::Unscoreable(text.to_string()))?;
        let p = softmax(&self.params.logits(&ids)?)?;
        Ok([p[POSITIVE], p[NEGATIVE]])
    }

    pub fn score(&self, text: &str) -> Result<f64> {
        Ok(self.probabilities(text)?[0])
    }

    /// Continues SGD from the current weights. An epoch visits every example
    /// of the larger class once, cycling the smaller class to match it; if
    /// one class is empty only the other is used. Returns per-epoch loss.
    pub fn fine_tune<P: AsRef<str>, N: AsRef<str>>(
        &mut self,
        positives: &[P],
        negatives: &[N],
        epochs: usize,
        lr: f64,
    ) -> Result<Vec<f64>> {
        let pos: Vec<Vec<usize>> = positives.iter().filter_map(|t| self.encode(t.as_ref())).collect();
        let neg: Vec<Vec<usize>> = negatives.iter().filter_map(|t| self.encode(t.as_ref())).collect();
        if pos.is_empty() && neg.is_empty() {
            return Ok(Vec::new());
        }
        self.meta.fine_tune_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta.seed.wrapping_add(self.meta.fine_tune_calls << 32));
        let mut opt = Sgd { lr };
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let batch = balanced_epoch(pos.len(), neg.len(), &mut rng);
            let mut total = 0.0;
            for &(label, idx) in &batch {
                let ids = if label == POSITIVE { &pos[idx] } else { &neg[idx] };
                let (loss, grads) = self.params.loss_and_grad(ids, label)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFinite("screener training diverged".into()));
                }
                opt.step(&mut self.params, &grads)?;
                total += loss;
            }
            let mean = total / batch.len() as f64;
            log::debug!("screener epoch loss {mean:.5}");
            history.push(mean);
        }
        self.meta.epochs += epochs;
        self.meta.loss_history.extend(&history);
        Ok(history)
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
        let config: ScreenerConfig = serde_json::from_value(ckpt.config.clone())?;
        let vocab = Vocabulary::from_full_list(ckpt.vocab.clone())?;
        let mut params = ScreenerParams::init(&config, vocab.len(), 0)?;
        ckpt.load_into(&mut params)?;
        let meta = serde_json::from_value(ckpt.metadata).unwrap_or_default();
        Ok(ScreenerModel {
            config,
            vocab,
            params,
            meta,
        })
    }
}

fn balanced_epoch(n_pos: usize, n_neg: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pos: Vec<usize> = (0..n_pos).collect();
    let mut neg: Vec<usize> = (0..n_neg).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n = n_pos.max(n_neg);
    let mut batch = Vec::with_capacity(2 * n);
    for i in 0..n {
        if n_pos > 0 {
            batch.push((POSITIVE, pos[i % n_pos]));
        }
        if n_neg > 0 {
            batch.push((NEGATIVE, neg[i % n_neg]));
        }
    }
    batch.shuffle(rng);
    batch
}

/// Trains a fresh screener with human-written selling points as positives.
pub fn train_screener<P: AsRef<str>, N: AsRef<str>>(
    positives: &[P],
    negatives: &[N],
    hyper: &ScreenerHyper,
) -> Result<ScreenerModel> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateTrainingSet(format!(
            "{} positives, {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let vocab = build_vocab(
        positives.iter().map(AsRef::as_ref).chain(negatives.iter().map(AsRef::as_ref)),
        hyper.min_freq,
        hyper.max_vocab,
    )?;
    let mut model = ScreenerModel::new(hyper.model, vocab, hyper.seed)?;
    let history = model.fine_tune(positives, negatives, hyper.epochs, hyper.lr)?;
    if history.is_empty() && hyper.epochs > 0 {
        return Err(Error::DegenerateTrainingSet("no tokenizable training text".into()));
    }
    log::info!(
        "screener trained: {} epochs, loss {:.4} -> {:.4}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

pub fn score(model: &ScreenerModel, text: &str) -> Result<f64> {
    model.score(text)
}

/// Scores candidates and keeps the `k` best, stable on ties. Candidates
/// that tokenize to nothing are dropped.
pub fn rank_top_k<C: HasText + Clone>(model: &ScreenerModel, candidates: &[C], k: usize) -> Vec<ScoredCandidate<C>> {
    let mut scored: Vec<ScoredCandidate<C>> = candidates
        .iter()
        .enumerate()
        .filter_map(|(index, c)| match model.score(c.text()) {
            Ok(score) => Some(ScoredCandidate {
                candidate: c.clone(),
                score,
                index,
            }),
            Err(e) => {
                log::debug!("skipping candidate {index}: {e}");
                None
            }
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k.max(1));
    scored
}

/// Orders precomputed scores descending with stable tie-breaking; returns
/// input indices.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}
