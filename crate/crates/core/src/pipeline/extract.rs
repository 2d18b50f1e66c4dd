use std::collections::HashSet;

use crate::corpus::{collect_candidates, normalize_text, tokenize, ProductRecord};
use crate::generator::{generate, GeneratorModel};
use crate::screener::{rank_top_k, ScreenerModel};
use crate::Result;

use super::{selling_point_id, PipelineConfig, PointSource, SellingPoint};

/// The three trained stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub coarse: ScreenerModel,
    pub generator: GeneratorModel,
    pub fine: ScreenerModel,
}

/// Coarse-screens, rewrites and fine-screens one product's candidates.
/// Output is sorted by score descending, deduplicated and capped.
pub fn extract_selling_points(product: &ProductRecord, models: &Models, config: &PipelineConfig) -> Result<Vec<SellingPoint>> {
    let candidates = collect_candidates(product, config.sources);
    if candidates.is_empty() {
        log::info!("sku {} has no candidate text", product.sku_id);
        return Ok(Vec::new());
    }
    let top = rank_top_k(&models.coarse, &candidates, config.k);

    // Originals first so they win score ties against their own rewrites.
    let mut union: Vec<(String, PointSource)> = top
        .iter()
        .map(|c| (c.candidate.text.clone(), PointSource::from(c.candidate.source)))
        .collect();
    for c in &top {
        match generate(&models.generator, &c.candidate.text, &config.decode) {
            Ok(text) if !text.is_empty() => union.push((text, PointSource::Generated)),
            Ok(_) => {}
            Err(e) => log::debug!("no rewrite for {:?}: {e}", c.candidate.text),
        }
    }

    let mut scored = Vec::with_capacity(union.len());
    for (text, source) in union {
        let n = tokenize(&text).len();
        if n == 0 || n > config.max_tokens {
            continue;
        }
        if let Ok(score) = models.fine.score(&text) {
            if score >= config.fine_threshold {
                scored.push((text, source, score));
            }
        }
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (text, source, score) in scored {
        if !seen.insert(normalize_text(&text)) {
            continue;
        }
        out.push(SellingPoint {
            selling_point_id: selling_point_id(&product.sku_id, &text),
            sku_id: product.sku_id.clone(),
            text,
            score,
            source,
            theme: None,
            filtered: false,
            created_at: config.created_at,
        });
        if out.len() == config.max_per_sku {
            break;
        }
    }
    Ok(out)
}

/// Runs extraction over every product in order.
pub fn extract_pool(products: &[ProductRecord], models: &Models, config: &PipelineConfig) -> Result<Vec<SellingPoint>> {
    let mut pool = Vec::new();
    for p in products {
        pool.extend(extract_selling_points(p, models, config)?);
    }
    Ok(pool)
}
