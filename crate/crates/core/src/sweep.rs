//! Threshold sweeps: operations saved against accuracy for the hybrid and
//! binary-only predictors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward_reference;
use crate::runtime::{argmax, hybrid_forward, HybridConfig, HybridModel, InputPolicy, OutcomeCounts, PredictorMode};
use crate::tensor::QuantTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hybrid,
    BinaryOnly,
}

impl Variant {
    fn mode(self) -> PredictorMode {
        match self {
            Variant::Hybrid => PredictorMode::Hybrid,
            Variant::BinaryOnly => PredictorMode::BinaryOnly,
        }
    }
}

/// One CSV row. Column order is the field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub threshold: f64,
    /// Skipped MACs over all MACs, with every layer fed reference inputs.
    pub ops_saved_pct: f64,
    /// Inputs whose top-1 class matches the reference when skips propagate.
    pub top1_agreement_pct: f64,
    pub correct_zero: u64,
    pub incorrect_zero: u64,
    pub correct_nonzero: u64,
    pub incorrect_nonzero: u64,
    pub not_predicted: u64,
}

fn row(hm: HybridModel<'_>, inputs: &[QuantTensor], variant: Variant, t: f64) -> Result<SweepRow> {
    let base = HybridConfig::default().with_threshold(t).with_mode(variant.mode());
    let local = base.clone().with_oracle(true).with_input_policy(InputPolicy::Reference);
    let mut outcomes = OutcomeCounts::default();
    let (mut skipped, mut total, mut agree) = (0u64, 0u64, 0u64);
    for x in inputs {
        let run = hybrid_forward(hm, x, &local)?;
        let s = run.stats();
        skipped += s.macs_skipped;
        total += s.macs_skipped + s.macs_executed;
        outcomes.merge(&run.outcome_counts().expect("oracle enabled"));
        let propagated = hybrid_forward(hm, x, &base)?;
        let reference = forward_reference(hm.model, x)?;
        let out = propagated.output().map(|o| o.data()).unwrap_or(x.data());
        if argmax(out) == argmax(reference.output().data()) {
            agree += 1;
        }
    }
    Ok(SweepRow {
        variant,
        threshold: t,
        ops_saved_pct: if total == 0 { 0.0 } else { 100.0 * skipped as f64 / total as f64 },
        top1_agreement_pct: 100.0 * agree as f64 / inputs.len() as f64,
        correct_zero: outcomes.correct_zero,
        incorrect_zero: outcomes.incorrect_zero,
        correct_nonzero: outcomes.correct_nonzero,
        incorrect_nonzero: outcomes.incorrect_nonzero,
        not_predicted: outcomes.not_predicted,
    })
}

/// Rows for both variants, each sorted by descending threshold. Threshold
/// points run in parallel.
pub fn sweep(hm: HybridModel<'_>, inputs: &[QuantTensor], thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::config("threshold list is empty"));
    }
    if inputs.is_empty() {
        return Err(Error::config("sweep needs at least one input"));
    }
    let mut ts = thresholds.to_vec();
    if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::config(format!("threshold {bad} outside [0, 1]")));
    }
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let jobs: Vec<(Variant, f64)> = [Variant::Hybrid, Variant::BinaryOnly]
        .iter()
        .flat_map(|&v| ts.iter().map(move |&t| (v, t)))
        .collect();
    jobs.par_iter().map(|&(v, t)| row(hm, inputs, v, t)).collect()
}

pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate_model;
    use crate::cluster::ModelClusters;
    use crate::synth;

    #[test]
    fn rows_are_sorted_and_monotone() {
        let model = synth::sweep_fixture(2);
        let params = calibrate_model(&model, &synth::input_batch(&model, 32, 64, 1), 0.9).unwrap();
        let clusters = ModelClusters::build(&model, None);
        let hm = HybridModel {
            model: &model,
            clusters: &clusters,
            params: &params,
        };
        let inputs = synth::input_batch(&model, 8, 64, 2);
        let rows = sweep(hm, &inputs, &[0.6, 1.0, 0.8]).unwrap();
        assert_eq!(rows.len(), 6);
        for v in [Variant::Hybrid, Variant::BinaryOnly] {
            let rs: Vec<&SweepRow> = rows.iter().filter(|r| r.variant == v).collect();
            assert_eq!(rs.iter().map(|r| r.threshold).collect::<Vec<_>>(), vec![1.0, 0.8, 0.6]);
            assert_eq!(rs[0].ops_saved_pct, 0.0);
            assert_eq!(rs[0].incorrect_zero, 0);
            assert!(rs.windows(2).all(|w| w[0].ops_saved_pct <= w[1].ops_saved_pct));
        }
        let csv = to_csv(&rows).unwrap();
        assert!(csv.starts_with(
            "variant,threshold,ops_saved_pct,top1_agreement_pct,correct_zero,incorrect_zero,correct_nonzero,incorrect_nonzero,not_predicted\n"
        ));
        assert!(matches!(sweep(hm, &inputs, &[]), Err(Error::Config(_))));
    }
}
