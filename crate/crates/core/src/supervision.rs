//! Online quality supervision over base/ctrl exposure-click logs.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Base,
    Ctrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Exposure,
    Click,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts: DateTime<Utc>,
    pub position: Position,
    pub sku_id: String,
    pub selling_point_id: String,
    pub event: EventKind,
    #[serde(default)]
    pub recall_source_tag: String,
}

/// Half-open `[start, end)`; either side may be unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
}

impl TimeWindow {
    pub fn all() -> Self {
        TimeWindow::default()
    }

    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        self.start.is_none_or(|s| *ts >= s) && self.end.is_none_or(|e| *ts < e)
    }
}

/// Parsed log plus the number of lines that could not be read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<EventRecord>,
    pub skipped: usize,
}

pub fn parse_log_lines<S: AsRef<str>>(lines: impl IntoIterator<Item = S>) -> ParsedLog {
    let mut out = ParsedLog::default();
    for (n, line) in lines.into_iter().enumerate() {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<EventRecord>(line) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                log::warn!("skipping malformed log record on line {}: {e}", n + 1);
                out.skipped += 1;
            }
        }
    }
    out
}

pub fn read_logs(path: &Path) -> Result<ParsedLog> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let lines = file.lines().collect::<std::io::Result<Vec<_>>>()?;
    Ok(parse_log_lines(lines))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub base_exp_pv: u64,
    pub base_clk_pv: u64,
    pub ctrl_exp_pv: u64,
    pub ctrl_clk_pv: u64,
}

impl Counts {
    pub fn record(&mut self, position: Position, event: EventKind) {
        let slot = match (position, event) {
            (Position::Base, EventKind::Exposure) => &mut self.base_exp_pv,
            (Position::Base, EventKind::Click) => &mut self.base_clk_pv,
            (Position::Ctrl, EventKind::Exposure) => &mut self.ctrl_exp_pv,
            (Position::Ctrl, EventKind::Click) => &mut self.ctrl_clk_pv,
        };
        *slot += 1;
    }

    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            base_exp_pv: self.base_exp_pv + other.base_exp_pv,
            base_clk_pv: self.base_clk_pv + other.base_clk_pv,
            ctrl_exp_pv: self.ctrl_exp_pv + other.ctrl_exp_pv,
            ctrl_clk_pv: self.ctrl_clk_pv + other.ctrl_clk_pv,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.base_clk_pv <= self.base_exp_pv && self.ctrl_clk_pv <= self.ctrl_exp_pv
    }

    pub fn base_ctr(&self) -> Option<f64> {
        ctr(self.base_clk_pv, self.base_exp_pv)
    }

    pub fn ctrl_ctr(&self) -> Option<f64> {
        ctr(self.ctrl_clk_pv, self.ctrl_exp_pv)
    }
}

fn ctr(clk: u64, exp: u64) -> Option<f64> {
    (exp > 0).then(|| clk as f64 / exp as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionAggregate {
    pub sku_id: String,
    pub selling_point_id: String,
    pub window: TimeWindow,
    pub base_exp_pv: u64,
    pub base_clk_pv: u64,
    pub ctrl_exp_pv: u64,
    pub ctrl_clk_pv: u64,
    pub relative_increase: Option<f64>,
}

impl SupervisionAggregate {
    pub fn new(sku_id: impl Into<String>, selling_point_id: impl Into<String>, window: TimeWindow, c: Counts) -> Self {
        SupervisionAggregate {
            sku_id: sku_id.into(),
            selling_point_id: selling_point_id.into(),
            window,
            base_exp_pv: c.base_exp_pv,
            base_clk_pv: c.base_clk_pv,
            ctrl_exp_pv: c.ctrl_exp_pv,
            ctrl_clk_pv: c.ctrl_clk_pv,
            relative_increase: relative_increase(c.base_clk_pv as f64, c.base_exp_pv as f64, c.ctrl_clk_pv as f64, c.ctrl_exp_pv as f64).ok(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            base_exp_pv: self.base_exp_pv,
            base_clk_pv: self.base_clk_pv,
            ctrl_exp_pv: self.ctrl_exp_pv,
            ctrl_clk_pv: self.ctrl_clk_pv,
        }
    }

    pub fn base_ctr(&self) -> Option<f64> {
        self.counts().base_ctr()
    }

    pub fn ctrl_ctr(&self) -> Option<f64> {
        self.counts().ctrl_ctr()
    }
}

pub type Key = (String, String);

/// Per-key counts; the unit that shards merge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable(pub BTreeMap<Key, Counts>);

impl CountTable {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EventRecord>, window: &TimeWindow) -> Self {
        let mut table = BTreeMap::<Key, Counts>::new();
        for r in records {
            if !window.contains(&r.ts) {
                continue;
            }
            table
                .entry((r.sku_id.clone(), r.selling_point_id.clone()))
                .or_default()
                .record(r.position, r.event);
        }
        CountTable(table)
    }

    pub fn merge(mut self, other: CountTable) -> CountTable {
        for (k, c) in other.0 {
            let slot = self.0.entry(k).or_default();
            *slot = slot.merge(c);
        }
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateOutput {
    pub aggregates: Vec<SupervisionAggregate>,
    /// Keys dropped because clicks exceeded exposures.
    pub inconsistent: usize,
}

/// Groups in-window records by (sku, selling point). Output is sorted by key.
pub fn aggregate(records: &[EventRecord], window: &TimeWindow) -> AggregateOutput {
    finish(CountTable::from_records(records, window), window)
}

pub fn finish(table: CountTable, window: &TimeWindow) -> AggregateOutput {
    let mut out = AggregateOutput::default();
    for ((sku, sp), c) in table.0 {
        if !c.is_consistent() {
            log::warn!("dropping aggregate for ({sku}, {sp}): clicks exceed exposures");
            out.inconsistent += 1;
            continue;
        }
        out.aggregates.push(SupervisionAggregate::new(sku, sp, *window, c));
    }
    out
}

/// `(base_clk / base_exp) / (ctrl_clk / ctrl_exp) - 1`.
pub fn relative_increase(base_clk: f64, base_exp: f64, ctrl_clk: f64, ctrl_exp: f64) -> Result<f64> {
    if base_exp <= 0.0 || ctrl_exp <= 0.0 || ctrl_clk <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "relative increase needs base_exp, ctrl_exp, ctrl_clk > 0 (got {base_exp}, {ctrl_exp}, {ctrl_clk})"
        )));
    }
    Ok((base_clk / base_exp) / (ctrl_clk / ctrl_exp) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionThresholds {
    pub high_relative_increase: f64,
    pub high_base_ctr: f64,
    pub low_ctr: f64,
}

impl Default for SupervisionThresholds {
    fn default() -> Self {
        SupervisionThresholds {
            high_relative_increase: 0.03,
            high_base_ctr: 0.05,
            low_ctr: 0.02,
        }
    }
}

impl SupervisionThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("high_relative_increase", self.high_relative_increase),
            ("high_base_ctr", self.high_base_ctr),
            ("low_ctr", self.low_ctr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub skipped: usize,
}

pub fn is_high_quality(a: &SupervisionAggregate, t: &SupervisionThresholds) -> bool {
    a.relative_increase.is_some_and(|r| r > t.high_relative_increase) || a.base_ctr().is_some_and(|c| c > t.high_base_ctr)
}

/// `None` when either CTR is undefined.
pub fn is_low_quality(a: &SupervisionAggregate, threshold: f64) -> Option<bool> {
    let (base, ctrl) = (a.base_ctr()?, a.ctrl_ctr()?);
    Some(base < ctrl && base < threshold)
}

fn resolve<'a>(texts: &'a HashMap<String, String>, a: &SupervisionAggregate) -> Option<&'a String> {
    let t = texts.get(&a.selling_point_id);
    if t.is_none() {
        log::warn!("selling point {} not in pool; skipped", a.selling_point_id);
    }
    t
}

pub fn recall_high_quality(aggregates: &[SupervisionAggregate], texts: &HashMap<String, String>, t: &SupervisionThresholds) -> RecallSet {
    let mut out = RecallSet::default();
    for a in aggregates {
        let Some(text) = resolve(texts, a) else {
            out.skipped += 1;
            continue;
        };
        if is_high_quality(a, t) {
            out.positives.push(text.clone());
        } else {
            out.negatives.push(text.clone());
        }
    }
    out
}

/// Positives here are the entries to filter.
pub fn recall_low_quality(aggregates: &[SupervisionAggregate], texts: &HashMap<String, String>, threshold: f64) -> Result<RecallSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut out = RecallSet::default();
    for a in aggregates {
        let Some(low) = is_low_quality(a, threshold) else {
            out.skipped += 1;
            continue;
        };
        let Some(text) = resolve(texts, a) else {
            out.skipped += 1;
            continue;
        };
        if low {
            out.positives.push(text.clone());
        } else {
            out.negatives.push(text.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSegment {
    Baseline,
    Experimental,
    Core,
    Transition,
}

impl StreamSegment {
    pub const ALL: [StreamSegment; 4] = [
        StreamSegment::Baseline,
        StreamSegment::Experimental,
        StreamSegment::Core,
        StreamSegment::Transition,
    ];

    pub fn ratio(self) -> u64 {
        match self {
            StreamSegment::Baseline | StreamSegment::Experimental | StreamSegment::Transition => 5,
            StreamSegment::Core => 85,
        }
    }

    pub fn from_bucket(bucket: u64) -> StreamSegment {
        match bucket {
            0..5 => StreamSegment::Baseline,
            5..10 => StreamSegment::Experimental,
            10..95 => StreamSegment::Core,
            _ => StreamSegment::Transition,
        }
    }
}

/// First eight bytes of the SHA-256 of `key`, big-endian, mod 100.
pub fn stream_bucket(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head) % 100
}

pub fn split_stream(key: &str) -> StreamSegment {
    StreamSegment::from_bucket(stream_bucket(key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    fn ev(t: &str, pos: Position, sp: &str, event: EventKind) -> EventRecord {
        EventRecord {
            ts: ts(t),
            position: pos,
            sku_id: "sku1".into(),
            selling_point_id: sp.into(),
            event,
            recall_source_tag: "test".into(),
        }
    }

    fn agg(base: (u64, u64), ctrl: (u64, u64)) -> SupervisionAggregate {
        let c = Counts {
            base_clk_pv: base.0,
            base_exp_pv: base.1,
            ctrl_clk_pv: ctrl.0,
            ctrl_exp_pv: ctrl.1,
        };
        SupervisionAggregate::new("s", "sp", TimeWindow::all(), c)
    }

    #[test]
    fn empty_log() {
        assert!(aggregate(&[], &TimeWindow::all()).aggregates.is_empty());
    }

    #[test]
    fn hand_count() {
        let t = "2024-01-01T00:00:00Z";
        let recs = vec![
            ev(t, Position::Base, "a", EventKind::Exposure),
            ev(t, Position::Base, "a", EventKind::Exposure),
            ev(t, Position::Base, "a", EventKind::Click),
        ];
        let out = aggregate(&recs, &TimeWindow::all());
        assert_eq!(out.aggregates.len(), 1);
        let a = &out.aggregates[0];
        assert_eq!((a.base_exp_pv, a.base_clk_pv, a.ctrl_exp_pv), (2, 1, 0));
        assert_eq!(a.relative_increase, None);
    }

    #[test]
    fn window_excludes() {
        let recs = vec![
            ev("2024-01-01T00:00:00Z", Position::Base, "a", EventKind::Exposure),
            ev("2024-01-02T00:00:00Z", Position::Base, "a", EventKind::Exposure),
        ];
        let w = TimeWindow {
            start: Some(ts("2024-01-01T00:00:00Z")),
            end: Some(ts("2024-01-02T00:00:00Z")),
        };
        assert_eq!(aggregate(&recs, &w).aggregates[0].base_exp_pv, 1);
    }

    #[test]
    fn clicks_over_exposures_dropped() {
        let recs = vec![ev("2024-01-01T00:00:00Z", Position::Ctrl, "a", EventKind::Click)];
        let out = aggregate(&recs, &TimeWindow::all());
        assert!(out.aggregates.is_empty());
        assert_eq!(out.inconsistent, 1);
    }

    #[test]
    fn malformed_lines_counted() {
        let good = r#"{"ts":"2024-01-01T00:00:00Z","position":"base","sku_id":"s","selling_point_id":"p","event":"click","recall_source_tag":"x"}"#;
        let out = parse_log_lines([good, "{not json", "", r#"{"ts":"2024-01-01T00:00:00Z","position":"side"}"#]);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped, 2);
    }

    #[test]
    fn relative_increase_examples() {
        assert_eq!(relative_increase(1.0, 10.0, 1.0, 10.0).unwrap(), 0.0);
        let r = relative_increase(82.3007, 1.0, 82.1632, 1.0).unwrap();
        assert!((r - 0.0017).abs() < 1e-4);
        assert!((relative_increase(30.0, 1000.0, 25.0, 1000.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(relative_increase(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(relative_increase(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(relative_increase(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn high_quality_rules() {
        let t = SupervisionThresholds::default();
        assert!(is_high_quality(&agg((21, 1000), (20, 1000)), &t));
        assert!(!is_high_quality(&agg((205, 10000), (200, 10000)), &t));
        assert!(is_high_quality(&agg((60, 1000), (594, 10000)), &t));
        let a = agg((103, 1000), (100, 1000));
        assert!((a.relative_increase.unwrap() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn high_quality_strict_boundary() {
        let mut a = agg((1, 100), (1, 100));
        a.relative_increase = Some(0.03);
        assert!(!is_high_quality(&a, &SupervisionThresholds::default()));
        a.relative_increase = Some(0.05);
        assert!(is_high_quality(&a, &SupervisionThresholds::default()));
    }

    #[test]
    fn low_quality_rules() {
        assert_eq!(is_low_quality(&agg((1, 100), (2, 100)), 0.02), Some(true));
        assert_eq!(is_low_quality(&agg((3, 100), (2, 100)), 0.5), Some(false));
        assert_eq!(is_low_quality(&agg((1, 100), (2, 100)), 0.005), Some(false));
        assert_eq!(is_low_quality(&agg((1, 100), (0, 0)), 0.02), None);
    }

    #[test]
    fn recall_resolves_and_skips() {
        let mut a = agg((10, 100), (1, 100));
        a.selling_point_id = "known".into();
        let mut b = agg((0, 100), (1, 100));
        b.selling_point_id = "missing".into();
        let texts = HashMap::from([("known".to_string(), "long battery life".to_string())]);
        let hi = recall_high_quality(&[a.clone(), b.clone()], &texts, &SupervisionThresholds::default());
        assert_eq!(hi.positives, ["long battery life"]);
        assert_eq!(hi.skipped, 1);
        let lo = recall_low_quality(&[a, b], &texts, 0.02).unwrap();
        assert_eq!(lo.negatives, ["long battery life"]);
        assert!(recall_low_quality(&[], &texts, 0.0).is_err());
    }

    #[test]
    fn stream_split() {
        assert_eq!(StreamSegment::ALL.iter().map(|s| s.ratio()).sum::<u64>(), 100);
        assert_eq!(split_stream("customer-1"), split_stream("customer-1"));
        let mut counts = HashMap::new();
        let n = 100_000;
        for i in 0..n {
            *counts.entry(split_stream(&format!("req-{i}"))).or_insert(0usize) += 1;
        }
        for s in StreamSegment::ALL {
            let share = counts[&s] as f64 / n as f64 * 100.0;
            assert!((share - s.ratio() as f64).abs() <= 1.0, "{s:?} {share}");
        }
    }

    fn arb_table() -> impl Strategy<Value = CountTable> {
        prop::collection::btree_map(
            (0u8..4, 0u8..4).prop_map(|(a, b)| (a.to_string(), b.to_string())),
            (0u64..50, 0u64..50, 0u64..50, 0u64..50).prop_map(|(a, b, c, d)| Counts {
                base_exp_pv: a,
                base_clk_pv: b,
                ctrl_exp_pv: c,
                ctrl_clk_pv: d,
            }),
            0..6,
        )
        .prop_map(CountTable)
    }

    proptest! {
        #[test]
        fn merge_assoc_commutative(a in arb_table(), b in arb_table(), c in arb_table()) {
            prop_assert_eq!(a.clone().merge(b.clone()), b.clone().merge(a.clone()));
            prop_assert_eq!(a.clone().merge(b.clone()).merge(c.clone()), a.merge(b.merge(c)));
        }

        #[test]
        fn scaling_one_side_is_invariant(
            bc in 1u32..1000, be in 1u32..1000, cc in 1u32..1000, ce in 1u32..1000,
            k in 1u32..50, base_side in any::<bool>(),
        ) {
            let (bc, be, cc, ce, k) = (bc as f64, be as f64, cc as f64, ce as f64, k as f64);
            let r = relative_increase(bc, be, cc, ce).unwrap();
            let scaled = if base_side {
                relative_increase(bc * k, be * k, cc, ce).unwrap()
            } else {
                relative_increase(bc, be, cc * k, ce * k).unwrap()
            };
            prop_assert!((r - scaled).abs() <= 1e-9 * (1.0 + r.abs()));
        }

        #[test]
        fn sharded_aggregate_matches(split in 0usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<EventRecord> = (0..20).map(|_| EventRecord {
                ts: ts("2024-01-01T00:00:00Z"),
                position: if rng.gen() { Position::Base } else { Position::Ctrl },
                sku_id: format!("s{}", rng.gen_range(0..3)),
                selling_point_id: format!("p{}", rng.gen_range(0..3)),
                event: if rng.gen_bool(0.3) { EventKind::Click } else { EventKind::Exposure },
                recall_source_tag: String::new(),
            }).collect();
            let w = TimeWindow::all();
            let whole = CountTable::from_records(&recs, &w);
            let parts = CountTable::from_records(&recs[..split], &w).merge(CountTable::from_records(&recs[split..], &w));
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn recall_partitions(rows in prop::collection::vec((0u64..20, 1u64..40, 0u64..20, 1u64..40), 0..12)) {
            let aggs: Vec<_> = rows.iter().enumerate().map(|(i, &(bc, be, cc, ce))| {
                let mut a = agg((bc.min(be), be), (cc.min(ce), ce));
                a.selling_point_id = i.to_string();
                a
            }).collect();
            let texts: HashMap<_, _> = (0..aggs.len()).map(|i| (i.to_string(), i.to_string())).collect();
            let hi = recall_high_quality(&aggs, &texts, &SupervisionThresholds::default());
            prop_assert_eq!(hi.positives.len() + hi.negatives.len(), aggs.len());
            let lo = recall_low_quality(&aggs, &texts, 0.02).unwrap();
            prop_assert_eq!(lo.positives.len() + lo.negatives.len(), aggs.len());
        }
    }
}
