use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::personalization::{assign, CustomerProfile, EmbeddingTable};
use crate::supervision::{split_stream, StreamSegment};
use crate::{Error, Result};

use super::SellingPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignRequest {
    pub customer_id: String,
    pub sku_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignResponse {
    pub selling_point_id: String,
    pub text: String,
    pub sku_id: String,
    pub customer_id: String,
    pub segment: StreamSegment,
    /// Cosine similarity; absent when the top-score fallback was used.
    pub similarity: Option<f64>,
    pub fallback: bool,
}

/// Immutable state a request is answered against.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pool: BTreeMap<String, Vec<SellingPoint>>,
    profiles: HashMap<String, CustomerProfile>,
    table: EmbeddingTable,
}

impl Snapshot {
    pub fn new(pool: Vec<SellingPoint>, profiles: Vec<CustomerProfile>, table: EmbeddingTable) -> Self {
        let mut by_sku: BTreeMap<String, Vec<SellingPoint>> = BTreeMap::new();
        for sp in pool {
            by_sku.entry(sp.sku_id.clone()).or_default().push(sp);
        }
        Snapshot {
            pool: by_sku,
            profiles: profiles.into_iter().map(|p| (p.customer_id.clone(), p)).collect(),
            table,
        }
    }

    pub fn entries(&self, sku_id: &str) -> Option<&[SellingPoint]> {
        self.pool.get(sku_id).map(Vec::as_slice)
    }

    pub fn pool(&self) -> impl Iterator<Item = &SellingPoint> {
        self.pool.values().flatten()
    }

    pub fn profile(&self, customer_id: &str) -> Option<&CustomerProfile> {
        self.profiles.get(customer_id)
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

/// Picks the sku entry nearest the customer's interests. Unknown or
/// unembeddable customers get the highest-scoring entry. Filtered entries
/// are never returned.
pub fn serve_assign(snapshot: &Snapshot, req: &AssignRequest) -> Result<AssignResponse> {
    let entries = snapshot
        .entries(&req.sku_id)
        .ok_or_else(|| Error::NotFound(format!("sku {}", req.sku_id)))?;
    let live: Vec<&SellingPoint> = entries.iter().filter(|e| !e.filtered).collect();
    if live.is_empty() {
        return Err(Error::NotFound(format!("no unfiltered selling points for sku {}", req.sku_id)));
    }
    let segment = split_stream(&req.customer_id);
    let assigned = match snapshot.profile(&req.customer_id) {
        Some(profile) => {
            let texts: Vec<&str> = live.iter().map(|e| e.text.as_str()).collect();
            match assign(profile, &texts, &snapshot.table) {
                Ok(a) => Some((live[a.index], a.similarity)),
                Err(e) => {
                    log::info!("assignment fallback for {}: {e}", req.customer_id);
                    None
                }
            }
        }
        None => {
            log::info!("assignment fallback for unknown customer {}", req.customer_id);
            None
        }
    };
    let (entry, similarity) = match assigned {
        Some((e, s)) => (e, Some(s)),
        None => {
            // First on ties keeps the choice stable.
            let best = live
                .iter()
                .copied()
                .reduce(|best, e| if e.score > best.score { e } else { best })
                .expect("non-empty");
            (best, None)
        }
    };
    Ok(AssignResponse {
        selling_point_id: entry.selling_point_id.clone(),
        text: entry.text.clone(),
        sku_id: req.sku_id.clone(),
        customer_id: req.customer_id.clone(),
        segment,
        similarity,
        fallback: similarity.is_none(),
    })
}

/// Holds the current snapshot. Readers clone the `Arc`; a swap replaces it
/// atomically and in-flight requests finish on the old one.
#[derive(Debug)]
pub struct SnapshotStore {
    current: RwLock<Arc<Snapshot>>,
}

impl SnapshotStore {
    pub fn new(snapshot: Snapshot) -> Self {
        SnapshotStore {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn load(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn swap(&self, snapshot: Snapshot) -> Arc<Snapshot> {
        let mut guard = self.current.write().unwrap_or_else(|p| p.into_inner());
        std::mem::replace(&mut *guard, Arc::new(snapshot))
    }
}
