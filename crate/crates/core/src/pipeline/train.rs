use std::collections::HashSet;

use crate::corpus::{collect_candidates, normalize_text, HumanSellingPoint, ProductRecord};
use crate::generator::{generate, train_generator, GeneratorModel};
use crate::screener::{rank_top_k, train_screener, ScreenerModel};
use crate::sharpening::{build_batches, run_sharpening, RoundReport, SharpeningSchedule};
use crate::synthetic::RewritePair;
use crate::{Error, Result};

use super::{Models, PipelineConfig};

fn push_unique(out: &mut Vec<String>, seen: &mut HashSet<String>, text: &str) {
    let key = normalize_text(text);
    if !key.is_empty() && seen.insert(key) {
        out.push(text.to_string());
    }
}

/// Human-written selling points against every product sentence that is not
/// one of them.
pub fn coarse_training_sets(
    products: &[ProductRecord],
    human: &[HumanSellingPoint],
    config: &PipelineConfig,
) -> (Vec<String>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut pos = Vec::new();
    for h in human {
        push_unique(&mut pos, &mut seen, &h.text);
    }
    let mut neg = Vec::new();
    for p in products {
        for c in collect_candidates(p, config.sources) {
            push_unique(&mut neg, &mut seen, &c.text);
        }
    }
    (pos, neg)
}

/// Coarse top-k sentences and their rewrites, minus anything equal to a
/// human-written positive.
pub fn sharpening_pool(
    products: &[ProductRecord],
    coarse: &ScreenerModel,
    generator: &GeneratorModel,
    positives: &[String],
    config: &PipelineConfig,
) -> Vec<String> {
    let mut seen: HashSet<String> = positives.iter().map(|p| normalize_text(p)).collect();
    let mut pool = Vec::new();
    for p in products {
        let top = rank_top_k(coarse, &collect_candidates(p, config.sources), config.k);
        for c in &top {
            push_unique(&mut pool, &mut seen, &c.candidate.text);
            if let Ok(text) = generate(generator, &c.candidate.text, &config.decode) {
                push_unique(&mut pool, &mut seen, &text);
            }
        }
    }
    pool
}

/// Trains coarse screener, generator and the sharpened fine screener.
pub fn train_models(
    products: &[ProductRecord],
    human: &[HumanSellingPoint],
    pairs: &[RewritePair],
    config: &PipelineConfig,
) -> Result<(Models, Vec<RoundReport>)> {
    config.validate()?;
    let (pos, neg) = coarse_training_sets(products, human, config);
    if pos.is_empty() {
        return Err(Error::DegenerateTrainingSet("no human-written selling points".into()));
    }
    log::info!("coarse screener: {} positives, {} negatives", pos.len(), neg.len());
    let coarse = train_screener(&pos, &neg, &config.screener)?;

    let pair_refs: Vec<(&str, &str)> = pairs.iter().map(|p| (p.source.as_str(), p.target.as_str())).collect();
    let generator = train_generator(&pair_refs, &config.generator)?;

    let pool = sharpening_pool(products, &coarse, &generator, &pos, config);
    let batches = build_batches(&pool, config.sharpening.rounds, config.seed)?;
    let schedule = SharpeningSchedule::new(pos, batches, config.sharpening)?;
    let (fine, reports) = run_sharpening(coarse.clone(), &schedule)?;
    Ok((
        Models {
            coarse,
            generator,
            fine,
        },
        reports,
    ))
}
