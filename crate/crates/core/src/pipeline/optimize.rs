use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::screener::ScreenerModel;
use crate::supervision::{aggregate, recall_high_quality, recall_low_quality, EventRecord, TimeWindow};
use crate::{Error, Result};

use super::{PipelineConfig, SellingPoint};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub aggregates: usize,
    pub inconsistent: usize,
    pub high_quality: usize,
    pub low_quality: usize,
    pub skipped: usize,
    pub fine_tuned: bool,
    pub rescored: usize,
    pub newly_filtered: usize,
}

/// Aggregates the logs, recalls high- and low-quality entries, fine-tunes
/// the fine screener with high-quality texts as positives and low-quality
/// texts as negatives, then rescores the whole pool. Entries that fall
/// below the acceptance threshold are marked filtered.
///
/// When neither recall set has anything the model and pool are untouched.
pub fn run_offline_optimization(
    logs: &[EventRecord],
    window: &TimeWindow,
    pool: &mut [SellingPoint],
    fine: &mut ScreenerModel,
    config: &PipelineConfig,
) -> Result<OptimizationReport> {
    if logs.is_empty() {
        return Err(Error::InvalidArgument("offline optimization needs a non-empty log".into()));
    }
    let agg = aggregate(logs, window);
    let texts: HashMap<String, String> = pool
        .iter()
        .map(|sp| (sp.selling_point_id.clone(), sp.text.clone()))
        .collect();
    let t = &config.supervision;
    let high = recall_high_quality(&agg.aggregates, &texts, t);
    let low = recall_low_quality(&agg.aggregates, &texts, t.low_ctr)?;
    let mut report = OptimizationReport {
        aggregates: agg.aggregates.len(),
        inconsistent: agg.inconsistent,
        high_quality: high.positives.len(),
        low_quality: low.positives.len(),
        skipped: high.skipped.max(low.skipped),
        ..OptimizationReport::default()
    };
    if high.positives.is_empty() && low.positives.is_empty() {
        log::info!("offline optimization: nothing recalled; no-op");
        return Ok(report);
    }
    fine.fine_tune(&high.positives, &low.positives, config.optimize_epochs, config.sharpening.lr)?;
    report.fine_tuned = true;
    for sp in pool.iter_mut() {
        if let Ok(score) = fine.score(&sp.text) {
            sp.score = score;
            report.rescored += 1;
        }
        if !sp.filtered && sp.score < config.fine_threshold {
            sp.filtered = true;
            report.newly_filtered += 1;
        }
    }
    log::info!(
        "offline optimization: {} high, {} low, {} newly filtered",
        report.high_quality,
        report.low_quality,
        report.newly_filtered
    );
    Ok(report)
}
