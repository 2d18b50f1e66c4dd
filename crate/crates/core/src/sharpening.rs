//! Recursive sharpening of the fine screener.
//!
//! Each round classifies the next candidate batch with the current model,
//! takes the candidates it accepts as that round's negatives and fine-tunes
//! against the fixed human-written positives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::screener::ScreenerModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpeningHyper {
    pub rounds: usize,
    pub threshold: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SharpeningHyper {
    fn default() -> Self {
        SharpeningHyper {
            rounds: 3,
            threshold: 0.5,
            epochs: 10,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharpeningSchedule {
    pub positives: Vec<String>,
    pub batches: Vec<Vec<String>>,
    pub hyper: SharpeningHyper,
    /// Fixed held-out set for AUC; defaults to the positives against every
    /// batch text.
    pub eval_pos: Vec<String>,
    pub eval_neg: Vec<String>,
}

impl SharpeningSchedule {
    pub fn new(positives: Vec<String>, batches: Vec<Vec<String>>, hyper: SharpeningHyper) -> Result<Self> {
        let eval_neg = batches.iter().flatten().cloned().collect();
        let s = SharpeningSchedule {
            eval_pos: positives.clone(),
            positives,
            batches,
            hyper,
            eval_neg,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_eval_set(mut self, eval_pos: Vec<String>, eval_neg: Vec<String>) -> Self {
        self.eval_pos = eval_pos;
        self.eval_neg = eval_neg;
        self
    }

    pub fn rounds(&self) -> usize {
        self.batches.len()
    }

    fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::DegenerateTrainingSet("no human-written positives".into()));
        }
        if self.batches.is_empty() {
            return Err(Error::InvalidArgument("sharpening needs at least one batch".into()));
        }
        Ok(())
    }
}

/// Shuffles the candidate pool with `seed` and cuts it into `rounds`
/// batches whose sizes differ by at most one.
pub fn build_batches(pool: &[String], rounds: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = shuffled.len() / rounds;
    let extra = shuffled.len() % rounds;
    let mut it = shuffled.into_iter();
    Ok((0..rounds)
        .map(|r| it.by_ref().take(base + usize::from(r < extra)).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub harvested: usize,
    /// Mean score of the harvested set before and after the round.
    pub pre_mean: Option<f64>,
    pub post_mean: Option<f64>,
    pub auc: Option<f64>,
}

/// Texts in `batch` scoring at least `threshold`.
pub fn harvest_positives(model: &ScreenerModel, batch: &[String], threshold: f64) -> Vec<String> {
    batch
        .iter()
        .filter(|t| model.score(t).is_ok_and(|s| s >= threshold))
        .cloned()
        .collect()
}

/// Fine-tunes with `positives` against `harvested`. An empty harvest leaves
/// the model untouched. Returns whether training happened.
pub fn sharpen_round(model: &mut ScreenerModel, harvested: &[String], positives: &[String], hyper: &SharpeningHyper) -> Result<bool> {
    if positives.is_empty() {
        return Err(Error::DegenerateTrainingSet("no human-written positives".into()));
    }
    if harvested.is_empty() {
        log::warn!("sharpening round harvested nothing; model unchanged");
        return Ok(false);
    }
    model.fine_tune(positives, harvested, hyper.epochs, hyper.lr)?;
    Ok(true)
}

fn mean_score(model: &ScreenerModel, texts: &[String]) -> Option<f64> {
    let scores: Vec<f64> = texts.iter().filter_map(|t| model.score(t).ok()).collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Probability a random positive outscores a random negative; ties count
/// half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += match p.partial_cmp(n) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn eval_auc(model: &ScreenerModel, pos: &[String], neg: &[String]) -> Option<f64> {
    let score_all = |ts: &[String]| -> Vec<f64> { ts.iter().filter_map(|t| model.score(t).ok()).collect() };
    auc(&score_all(pos), &score_all(neg))
}

/// Runs every round in order and reports each one.
pub fn run_sharpening(mut model: ScreenerModel, schedule: &SharpeningSchedule) -> Result<(ScreenerModel, Vec<RoundReport>)> {
    schedule.validate()?;
    let mut reports = Vec::with_capacity(schedule.rounds());
    for (n, batch) in schedule.batches.iter().enumerate() {
        let harvested = harvest_positives(&model, batch, schedule.hyper.threshold);
        let pre_mean = mean_score(&model, &harvested);
        sharpen_round(&mut model, &harvested, &schedule.positives, &schedule.hyper)?;
        let report = RoundReport {
            round: n + 1,
            harvested: harvested.len(),
            pre_mean,
            post_mean: mean_score(&model, &harvested),
            auc: eval_auc(&model, &schedule.eval_pos, &schedule.eval_neg),
        };
        log::info!(
            "sharpening round {}: harvested {}, mean {:?} -> {:?}, auc {:?}",
            report.round,
            report.harvested,
            report.pre_mean,
            report.post_mean,
            report.auc
        );
        reports.push(report);
    }
    Ok((model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screener::{train_screener, ScreenerHyper};
    use crate::synthetic::{paraphrase_corpus, separable_corpus};

    fn base_model() -> (ScreenerModel, crate::synthetic::SeparableCorpus) {
        let c = separable_corpus(40, 21);
        let m = train_screener(&c.train_pos, &c.train_neg, &ScreenerHyper::default()).unwrap();
        (m, c)
    }

    #[test]
    fn harvest_thresholds() {
        let (m, c) = base_model();
        let batch: Vec<String> = c.test_pos.iter().chain(&c.test_neg).cloned().collect();
        assert_eq!(harvest_positives(&m, &batch, 0.0), batch);
        assert!(harvest_positives(&m, &batch, 1.1).is_empty());
        let got = harvest_positives(&m, &batch, 0.5);
        assert_eq!(got, c.test_pos);
    }

    #[test]
    fn empty_harvest_is_noop() {
        let (mut m, c) = base_model();
        let before = m.clone();
        assert!(!sharpen_round(&mut m, &[], &c.train_pos, &SharpeningHyper::default()).unwrap());
        assert_eq!(m, before);
        assert!(sharpen_round(&mut m, &[], &[], &SharpeningHyper::default()).is_err());
    }

    #[test]
    fn all_empty_batches_keep_scores() {
        let (m, c) = base_model();
        let schedule = SharpeningSchedule::new(c.train_pos.clone(), vec![vec![], vec![]], SharpeningHyper::default()).unwrap();
        let (out, reports) = run_sharpening(m.clone(), &schedule).unwrap();
        for t in &c.test_neg {
            assert_eq!(out.score(t).unwrap(), m.score(t).unwrap());
        }
        assert!(reports.iter().all(|r| r.harvested == 0));
    }

    #[test]
    fn single_round_equals_sharpen_round() {
        let p = paraphrase_corpus(1, 30, 4);
        let hyper = ScreenerHyper::default();
        let m = train_screener(&p.human_pos, &p.initial_neg, &hyper).unwrap();
        let schedule = SharpeningSchedule::new(p.human_pos.clone(), p.batches.clone(), SharpeningHyper::default()).unwrap();
        let (via_run, _) = run_sharpening(m.clone(), &schedule).unwrap();
        let mut manual = m;
        let harvested = harvest_positives(&manual, &p.batches[0], 0.5);
        sharpen_round(&mut manual, &harvested, &p.human_pos, &SharpeningHyper::default()).unwrap();
        assert_eq!(via_run, manual);
    }

    #[test]
    fn round_lowers_harvest_and_keeps_positives() {
        let p = paraphrase_corpus(1, 40, 8);
        let mut m = train_screener(&p.human_pos, &p.initial_neg, &ScreenerHyper::default()).unwrap();
        let harvested = harvest_positives(&m, &p.batches[0], 0.5);
        assert!(!harvested.is_empty());
        let before = mean_score(&m, &harvested).unwrap();
        sharpen_round(&mut m, &harvested, &p.human_pos, &SharpeningHyper::default()).unwrap();
        assert!(mean_score(&m, &harvested).unwrap() < before);
        assert!(mean_score(&m, &p.human_pos).unwrap() >= 0.5);
    }

    #[test]
    fn batches_partition_pool() {
        let pool: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let b = build_batches(&pool, 3, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 3, 3]);
        let mut all: Vec<String> = b.into_iter().flatten().collect();
        all.sort();
        let mut expected = pool.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert!(build_batches(&pool, 0, 1).is_err());
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1]), Some(1.0));
        assert_eq!(auc(&[0.1], &[0.9]), Some(0.0));
        assert_eq!(auc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(auc(&[], &[0.5]), None);
    }
}
