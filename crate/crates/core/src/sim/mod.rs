//! Cycle-approximate accelerator model: CUs, binCUs, on-chip SRAMs and a
//! simple DRAM pipe.

mod config;
mod energy;
mod schedule;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AccelConfig, CostModel, DramConfig, SimConfig};
pub use energy::{energy_report, EnergyBreakdown};
pub use schedule::{
    row_blocks, schedule_layer, Gate, LayerCounts, LayerTrace, LayerWork, NeuronWork, RowBlock, TraceEvent, Unit,
    PARAM_STAGING_BYTES,
};

use crate::cluster::Role;
use crate::error::{Error, Result};
use crate::runtime::{hybrid_forward, HybridConfig, HybridModel, HybridRun, OutcomeCounts, PredictorMode};
use crate::tensor::QuantTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    #[serde(flatten)]
    pub counts: LayerCounts,
    pub energy: f64,
    pub dynamic_energy: f64,
    pub predictor_energy: f64,
    pub outcomes: OutcomeCounts,
}

impl LayerStats {
    fn new(counts: LayerCounts, outcomes: OutcomeCounts, cost: &CostModel) -> Self {
        let e = energy_report(&counts, cost);
        LayerStats {
            counts,
            energy: e.total(),
            dynamic_energy: e.dynamic(),
            predictor_energy: e.predictor,
            outcomes,
        }
    }
}

/// Per-layer and total statistics summed over an input batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub layers: Vec<LayerStats>,
    pub total: LayerStats,
}

impl RunStats {
    pub fn seconds(&self, accel: &AccelConfig) -> f64 {
        self.total.counts.cycles as f64 / (accel.frequency_mhz * 1e6)
    }
}

/// Schedule of one layer for one input, derived from a hybrid run.
fn layer_work(
    hm: HybridModel<'_>,
    i: usize,
    run: Option<(&HybridRun, &HybridConfig, &crate::calibration::PredictorTable)>,
    accel: &AccelConfig,
) -> Result<LayerWork> {
    let model = hm.model;
    let layer = model.layer(i);
    let plan = &hm.clusters.layers[i];
    let order = plan.storage_order();
    let mut lw = LayerWork::dense(layer, model.layer_input_shape(i), &order, accel)?;
    let Some((run, cfg, params)) = run else {
        return Ok(lw);
    };
    if !cfg.predicts_layer(model, i) {
        return Ok(lw);
    }
    let hl = &run.layers[i];
    let p = lw.positions;
    let roles = plan.roles();
    for w in &mut lw.work {
        let n = w.neuron;
        w.skipped.copy_from_slice(&hl.skipped[n * p..(n + 1) * p]);
        w.binary.copy_from_slice(&hl.binary[n * p..(n + 1) * p]);
        if let Role::Member { proxy, .. } = roles[n] {
            let gated = match cfg.mode {
                PredictorMode::Hybrid => params.layers[i][n].enabled(),
                PredictorMode::ProxyOnly => true,
                PredictorMode::BinaryOnly | PredictorMode::Off => false,
            };
            if gated {
                w.gate = Gate::Proxy(proxy);
            }
        }
    }
    Ok(lw)
}

/// Simulates `inputs` one after another. `predictor = None` runs every
/// neuron in storage order with the binary path idle.
pub fn simulate(
    hm: HybridModel<'_>,
    inputs: &[QuantTensor],
    accel: &AccelConfig,
    cost: &CostModel,
    predictor: Option<&HybridConfig>,
) -> Result<RunStats> {
    accel.validate()?;
    cost.validate()?;
    hm.clusters.validate_for(hm.model)?;
    if inputs.is_empty() {
        return Err(Error::config("simulation needs at least one input"));
    }
    let gated = match predictor {
        Some(cfg) => {
            hm.params.validate_for(hm.model)?;
            Some(cfg.gated(hm.params)?)
        }
        None => None,
    };
    let n_layers = hm.model.len();
    // Independent inputs run in parallel; results are summed in input order.
    let per_input: Vec<Vec<(LayerCounts, OutcomeCounts)>> = inputs
        .par_iter()
        .map(|x| {
            let run = match predictor {
                Some(cfg) => Some(hybrid_forward(hm, x, cfg)?),
                None => None,
            };
            (0..n_layers)
                .map(|i| {
                    let ctx = match (&run, predictor, &gated) {
                        (Some(r), Some(c), Some(p)) => Some((r, c, &**p)),
                        _ => None,
                    };
                    let lw = layer_work(hm, i, ctx, accel)?;
                    let counts = schedule_layer(&lw, accel)?.counts;
                    let outcomes = run
                        .as_ref()
                        .and_then(|r| r.layers[i].outcome_counts())
                        .unwrap_or_default();
                    Ok((counts, outcomes))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut layers = vec![(LayerCounts::default(), OutcomeCounts::default()); n_layers];
    for run in &per_input {
        for (acc, (c, o)) in layers.iter_mut().zip(run) {
            acc.0.merge(c);
            acc.1.merge(o);
        }
    }
    let mut total_counts = LayerCounts::default();
    let mut total_outcomes = OutcomeCounts::default();
    for (c, o) in &layers {
        total_counts.merge(c);
        total_outcomes.merge(o);
    }
    Ok(RunStats {
        layers: layers.iter().map(|(c, o)| LayerStats::new(*c, *o, cost)).collect(),
        total: LayerStats::new(total_counts, total_outcomes, cost),
    })
}
