//! Stats files and paired comparisons.
//!
//! A stats file is JSON lines: one `header` record, one `layer` record per
//! layer, one `total` record.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{LayerStats, RunStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsHeader {
    pub model_hash: String,
    /// `off`, `hybrid`, `binary_only` or `proxy_only`.
    pub predictor: String,
    pub threshold: Option<f64>,
    pub inputs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    layer: usize,
    #[serde(flatten)]
    stats: LayerStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(StatsHeader),
    Layer(LayerRecord),
    Total(LayerStats),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsFile {
    pub header: StatsHeader,
    pub stats: RunStats,
}

impl StatsFile {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("stats serialize"));
            out.push('\n');
        };
        push(&Record::Header(self.header.clone()));
        for (i, l) in self.stats.layers.iter().enumerate() {
            push(&Record::Layer(LayerRecord { layer: i, stats: *l }));
        }
        push(&Record::Total(self.stats.total));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut layers = Vec::new();
        let mut total = None;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let rec: Record =
                    serde_json::from_str(trimmed).map_err(|e| Error::parse(offset, format!("stats record: {e}")))?;
                match rec {
                    Record::Header(h) if header.is_none() => header = Some(h),
                    Record::Layer(l) if l.layer == layers.len() => layers.push(l.stats),
                    Record::Total(t) if total.is_none() => total = Some(t),
                    _ => return Err(Error::parse(offset, "unexpected or out-of-order record")),
                }
            }
            offset += line.len();
        }
        match (header, total) {
            (Some(header), Some(total)) => Ok(StatsFile {
                header,
                stats: RunStats { layers, total },
            }),
            _ => Err(Error::parse(offset, "stats file needs a header and a total record")),
        }
    }
}

/// One row of a paired comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Layer index, or `total`.
    pub layer: String,
    pub cycles_base: u64,
    pub cycles_pred: u64,
    pub speedup: f64,
    pub energy_base: f64,
    pub energy_pred: f64,
    pub energy_savings_pct: f64,
    pub dynamic_energy_savings_pct: f64,
    pub macs_skipped_pct: f64,
    pub predictor_energy_pct: f64,
    pub correct_zero: u64,
    pub incorrect_zero: u64,
    pub correct_nonzero: u64,
    pub incorrect_nonzero: u64,
    pub not_predicted: u64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

fn savings(base: f64, pred: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - pred) / base
    }
}

fn compare_layer(name: String, b: &LayerStats, p: &LayerStats) -> ComparisonRow {
    let macs = p.counts.macs_executed + p.counts.macs_skipped;
    ComparisonRow {
        layer: name,
        cycles_base: b.counts.cycles,
        cycles_pred: p.counts.cycles,
        speedup: ratio(b.counts.cycles as f64, p.counts.cycles as f64),
        energy_base: b.energy,
        energy_pred: p.energy,
        energy_savings_pct: savings(b.energy, p.energy),
        dynamic_energy_savings_pct: savings(b.dynamic_energy, p.dynamic_energy),
        macs_skipped_pct: if macs == 0 { 0.0 } else { 100.0 * p.counts.macs_skipped as f64 / macs as f64 },
        predictor_energy_pct: if p.energy == 0.0 { 0.0 } else { 100.0 * p.predictor_energy / p.energy },
        correct_zero: p.outcomes.correct_zero,
        incorrect_zero: p.outcomes.incorrect_zero,
        correct_nonzero: p.outcomes.correct_nonzero,
        incorrect_nonzero: p.outcomes.incorrect_nonzero,
        not_predicted: p.outcomes.not_predicted,
    }
}

/// Compares a predictor run against its paired baseline. Runs of different
/// models are refused.
pub fn compare(base: &StatsFile, pred: &StatsFile) -> Result<Vec<ComparisonRow>> {
    if base.header.model_hash != pred.header.model_hash {
        return Err(Error::config(format!(
            "model hashes differ ({} vs {}); refusing to compare",
            base.header.model_hash, pred.header.model_hash
        )));
    }
    if base.stats.layers.len() != pred.stats.layers.len() {
        return Err(Error::config("paired runs have different layer counts"));
    }
    let mut rows: Vec<ComparisonRow> = base
        .stats
        .layers
        .iter()
        .zip(&pred.stats.layers)
        .enumerate()
        .map(|(i, (b, p))| compare_layer(i.to_string(), b, p))
        .collect();
    rows.push(compare_layer("total".into(), &base.stats.total, &pred.stats.total));
    Ok(rows)
}

pub fn to_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_text(base: &StatsHeader, pred: &StatsHeader, rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {}", base.model_hash);
    let _ = writeln!(
        s,
        "baseline: predictor {}  |  compared: predictor {} threshold {}",
        base.predictor,
        pred.predictor,
        pred.threshold.map_or("-".into(), |t| t.to_string())
    );
    let _ = writeln!(
        s,
        "{:>6} {:>12} {:>12} {:>8} {:>9} {:>9} {:>8}",
        "layer", "cycles", "cycles'", "speedup", "energy%", "macs%", "pred%"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>12} {:>7.2}x {:>8.1}% {:>8.1}% {:>7.2}%",
            r.layer,
            r.cycles_base,
            r.cycles_pred,
            r.speedup,
            r.energy_savings_pct,
            r.macs_skipped_pct,
            r.predictor_energy_pct
        );
    }
    if let Some(t) = rows.last() {
        let _ = writeln!(
            s,
            "outcomes: {} correct zero, {} incorrect zero, {} correct nonzero, {} incorrect nonzero, {} not predicted",
            t.correct_zero, t.incorrect_zero, t.correct_nonzero, t.incorrect_nonzero, t.not_predicted
        );
    }
    s
}
