//! Orchestration: extraction into the selling-point pool, assignment
//! snapshots and offline optimization.

mod extract;
mod optimize;
mod serve;
mod train;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{normalize_text, SourceKind, SourceToggles};
use crate::generator::{DecodeConfig, GeneratorHyper};
use crate::screener::ScreenerHyper;
use crate::sharpening::SharpeningHyper;
use crate::supervision::SupervisionThresholds;
use crate::{Error, Result};

pub use extract::{extract_pool, extract_selling_points, Models};
pub use optimize::{run_offline_optimization, OptimizationReport};
pub use serve::{serve_assign, AssignRequest, AssignResponse, Snapshot, SnapshotStore};
pub use train::{coarse_training_sets, sharpening_pool, train_models};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Description,
    Review,
    Ocr,
    Generated,
}

impl From<SourceKind> for PointSource {
    fn from(s: SourceKind) -> Self {
        match s {
            SourceKind::Description => PointSource::Description,
            SourceKind::Review => PointSource::Review,
            SourceKind::Ocr => PointSource::Ocr,
        }
    }
}

/// One line of `pool.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellingPoint {
    pub selling_point_id: String,
    pub sku_id: String,
    pub text: String,
    pub score: f64,
    pub source: PointSource,
    pub theme: Option<String>,
    #[serde(default)]
    pub filtered: bool,
    pub created_at: DateTime<Utc>,
}

/// Stable id from the sku and the dedup key of the text.
pub fn selling_point_id(sku_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(sku_id.as_bytes());
    h.update([0u8]);
    h.update(normalize_text(text).as_bytes());
    let digest = h.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("{sku_id}:{hex}")
}

pub fn default_created_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Coarse top-k.
    pub k: usize,
    pub decode: DecodeConfig,
    pub fine_threshold: f64,
    pub max_per_sku: usize,
    pub max_tokens: usize,
    pub sources: SourceToggles,
    pub sharpening: SharpeningHyper,
    pub supervision: SupervisionThresholds,
    /// Fine-tune epochs for offline optimization.
    pub optimize_epochs: usize,
    pub screener: ScreenerHyper,
    pub generator: GeneratorHyper,
    /// Stamped on every extracted entry.
    pub created_at: DateTime<Utc>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            k: 20,
            decode: DecodeConfig::default(),
            fine_threshold: 0.6,
            max_per_sku: 5,
            max_tokens: 16,
            sources: SourceToggles::default(),
            sharpening: SharpeningHyper::default(),
            supervision: SupervisionThresholds::default(),
            optimize_epochs: 10,
            screener: ScreenerHyper::default(),
            generator: GeneratorHyper::default(),
            created_at: default_created_at(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.max_per_sku == 0 || self.max_tokens == 0 {
            return Err(Error::Config("max_per_sku and max_tokens must be >= 1".into()));
        }
        for (name, v) in [
            ("fine_threshold", self.fine_threshold),
            ("sharpening.threshold", self.sharpening.threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.sharpening.rounds == 0 {
            return Err(Error::Config("sharpening.rounds must be >= 1".into()));
        }
        self.supervision.validate()?;
        self.decode.validate()
    }

    /// Derives every component seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.screener.seed = seed.wrapping_mul(31).wrapping_add(7);
        self.generator.seed = seed.wrapping_mul(31).wrapping_add(13);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes one JSON object per line. An empty pool gives an empty file.
pub fn pool_save(pool: &[SellingPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for sp in pool {
        serde_json::to_writer(&mut w, sp)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn pool_load(path: impl AsRef<Path>) -> Result<Vec<SellingPoint>> {
    let path = path.as_ref();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pool = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sp: SellingPoint = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&sp.score) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("score {} outside [0, 1]", sp.score),
            });
        }
        pool.push(sp);
    }
    Ok(pool)
}

/// Fills missing themes from human selling points with the same dedup key.
pub fn annotate_themes(pool: &mut [SellingPoint], human: &[crate::corpus::HumanSellingPoint]) {
    let themes: std::collections::HashMap<String, &str> = human
        .iter()
        .filter_map(|h| h.theme.as_deref().map(|t| (normalize_text(&h.text), t)))
        .collect();
    for sp in pool.iter_mut().filter(|sp| sp.theme.is_none()) {
        if let Some(t) = themes.get(&normalize_text(&sp.text)) {
            sp.theme = Some(t.to_string());
        }
    }
}
