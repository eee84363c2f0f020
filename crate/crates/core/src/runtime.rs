//! Hybrid inference: proxies first, then members gated by the proxy's zero
//! output and the member's own binary estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{binarize_vector, binary_dot_unchecked, binary_rows, PredictorParams, PredictorTable, SignVector};
use crate::cluster::{ModelClusters, Role};
use crate::error::{Error, Result};
use crate::fixed::{BnAffine, Fixed};
use crate::model::{forward_reference, residual_of_record, residual_source, LayerContext, QuantModel};
use crate::tensor::QuantTensor;

/// `BN(m * p_bin + b) + residual`, applying only the stages present.
pub fn estimate_base(
    p_bin: i32,
    params: &PredictorParams,
    bn: Option<&BnAffine>,
    residual: Option<Fixed>,
) -> Result<Fixed> {
    if !params.enabled() {
        return Err(Error::Contract("estimate requested for a disabled neuron".into()));
    }
    let mut v = params.line(p_bin);
    if let Some(bn) = bn {
        v = bn.apply(v);
    }
    if let Some(r) = residual {
        v = v.saturating_add(r);
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    Skip,
    Evaluate(EvaluateReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvaluateReason {
    ProxyNonzero,
    Disabled,
    EstimateNonnegative,
}

impl Decision {
    pub fn is_skip(self) -> bool {
        self == Decision::Skip
    }

    /// Whether the binary path had to run to reach this decision.
    pub fn consulted_binary(self) -> bool {
        matches!(self, Decision::Skip | Decision::Evaluate(EvaluateReason::EstimateNonnegative))
    }
}

/// What the binary path knows about one member element.
#[derive(Clone, Copy, Debug)]
pub struct MemberView<'a> {
    pub params: &'a PredictorParams,
    pub weights: &'a SignVector,
    pub window: &'a SignVector,
    pub bn: Option<&'a BnAffine>,
    pub residual: Option<Fixed>,
}

impl MemberView<'_> {
    fn estimate(&self) -> Result<Fixed> {
        estimate_base(binary_dot_unchecked(self.weights, self.window), self.params, self.bn, self.residual)
    }
}

/// `proxy_zero` is `None` while the proxy has not been evaluated.
pub fn predict_member_zero(member: &MemberView<'_>, proxy_zero: Option<bool>) -> Result<Decision> {
    let Some(proxy_zero) = proxy_zero else {
        return Err(Error::Contract("member consulted before its proxy was evaluated".into()));
    };
    if !proxy_zero {
        return Ok(Decision::Evaluate(EvaluateReason::ProxyNonzero));
    }
    if !member.params.enabled() {
        return Ok(Decision::Evaluate(EvaluateReason::Disabled));
    }
    // A zero estimate is evaluated: errors lean toward accuracy.
    Ok(if member.estimate()?.is_negative() {
        Decision::Skip
    } else {
        Decision::Evaluate(EvaluateReason::EstimateNonnegative)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictorMode {
    /// Evaluate everything.
    Off,
    /// Skip a member when its proxy is zero and its binary estimate is negative.
    #[default]
    Hybrid,
    /// Skip any enabled ReLU neuron whose binary estimate is negative.
    BinaryOnly,
    /// Skip every member of a zero proxy.
    ProxyOnly,
}

/// Which activations feed each layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputPolicy {
    /// Each layer consumes the hybrid output of the previous one.
    #[default]
    Propagate,
    /// Each layer consumes the reference activations, so decisions in one
    /// layer never change the inputs of another.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Re-gates the stored parameters; `None` keeps their `enabled` flags.
    pub threshold: Option<f64>,
    pub mode: PredictorMode,
    /// Layers where prediction may run; `None` allows all.
    pub layer_mask: Option<Vec<bool>>,
    /// Label outcome quadrants against exact evaluation.
    pub oracle: bool,
    pub input_policy: InputPolicy,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            threshold: None,
            mode: PredictorMode::Hybrid,
            layer_mask: None,
            oracle: false,
            input_policy: InputPolicy::Propagate,
        }
    }
}

impl HybridConfig {
    pub fn with_threshold(mut self, t: f64) -> Self {
        self.threshold = Some(t);
        self
    }

    pub fn with_mode(mut self, mode: PredictorMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_oracle(mut self, oracle: bool) -> Self {
        self.oracle = oracle;
        self
    }

    pub fn with_input_policy(mut self, policy: InputPolicy) -> Self {
        self.input_policy = policy;
        self
    }

    /// Whether prediction runs in layer `i` of `model`.
    pub fn predicts_layer(&self, model: &QuantModel, i: usize) -> bool {
        model.layer(i).relu
            && self.mode != PredictorMode::Off
            && self.layer_mask.as_ref().is_none_or(|m| m.get(i).copied().unwrap_or(false))
    }

    /// The parameter table after applying `threshold`.
    pub fn gated<'a>(&self, params: &'a PredictorTable) -> Result<std::borrow::Cow<'a, PredictorTable>> {
        Ok(match self.threshold {
            Some(t) => std::borrow::Cow::Owned(params.with_threshold(t)?),
            None => std::borrow::Cow::Borrowed(params),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    CorrectZero,
    IncorrectZero,
    CorrectNonzero,
    IncorrectNonzero,
    NotPredicted,
}

impl Outcome {
    fn label(predicted_zero: bool, actual_zero: bool) -> Outcome {
        match (predicted_zero, actual_zero) {
            (true, true) => Outcome::CorrectZero,
            (true, false) => Outcome::IncorrectZero,
            (false, false) => Outcome::CorrectNonzero,
            (false, true) => Outcome::IncorrectNonzero,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct_zero: u64,
    pub incorrect_zero: u64,
    pub correct_nonzero: u64,
    pub incorrect_nonzero: u64,
    pub not_predicted: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::CorrectZero => self.correct_zero += 1,
            Outcome::IncorrectZero => self.incorrect_zero += 1,
            Outcome::CorrectNonzero => self.correct_nonzero += 1,
            Outcome::IncorrectNonzero => self.incorrect_nonzero += 1,
            Outcome::NotPredicted => self.not_predicted += 1,
        }
    }

    pub fn merge(&mut self, o: &OutcomeCounts) {
        self.correct_zero += o.correct_zero;
        self.incorrect_zero += o.incorrect_zero;
        self.correct_nonzero += o.correct_nonzero;
        self.incorrect_nonzero += o.incorrect_nonzero;
        self.not_predicted += o.not_predicted;
    }

    pub fn total(&self) -> u64 {
        self.correct_zero + self.incorrect_zero + self.correct_nonzero + self.incorrect_nonzero + self.not_predicted
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipStats {
    pub elements: u64,
    pub skipped: u64,
    pub binary_dots: u64,
    pub macs_executed: u64,
    pub macs_skipped: u64,
}

impl SkipStats {
    pub fn merge(&mut self, o: &SkipStats) {
        self.elements += o.elements;
        self.skipped += o.skipped;
        self.binary_dots += o.binary_dots;
        self.macs_executed += o.macs_executed;
        self.macs_skipped += o.macs_skipped;
    }
}

/// Result of one layer. Masks are neuron-major, like the output.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridLayer {
    pub output: QuantTensor,
    pub skipped: Vec<bool>,
    /// Elements whose binary dot product was computed.
    pub binary: Vec<bool>,
    pub outcomes: Option<Vec<Outcome>>,
    pub stats: SkipStats,
}

impl HybridLayer {
    pub fn outcome_counts(&self) -> Option<OutcomeCounts> {
        self.outcomes.as_ref().map(|os| {
            let mut c = OutcomeCounts::default();
            os.iter().for_each(|&o| c.add(o));
            c
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridRun {
    pub layers: Vec<HybridLayer>,
}

impl HybridRun {
    pub fn output(&self) -> Option<&QuantTensor> {
        self.layers.last().map(|l| &l.output)
    }

    pub fn stats(&self) -> SkipStats {
        let mut s = SkipStats::default();
        self.layers.iter().for_each(|l| s.merge(&l.stats));
        s
    }

    pub fn outcome_counts(&self) -> Option<OutcomeCounts> {
        let mut total = OutcomeCounts::default();
        for l in &self.layers {
            total.merge(&l.outcome_counts()?);
        }
        Some(total)
    }
}

/// Model plus the offline artifacts the hybrid engine needs.
#[derive(Clone, Copy, Debug)]
pub struct HybridModel<'a> {
    pub model: &'a QuantModel,
    pub clusters: &'a ModelClusters,
    pub params: &'a PredictorTable,
}

/// Per-element decision for one layer, before any base-precision work on
/// members. `proxy_zero[n * positions + p]` must be final for proxies.
fn decide(
    mode: PredictorMode,
    role: Role,
    member: impl FnOnce() -> Result<Decision>,
    binary: impl FnOnce() -> Result<Decision>,
    proxy_zero: Option<bool>,
) -> Result<(Decision, bool)> {
    // Returns the decision and whether the element counts as predicted.
    match (mode, role) {
        (PredictorMode::Hybrid, Role::Member { .. }) => {
            let d = member()?;
            Ok((d, d != Decision::Evaluate(EvaluateReason::Disabled)))
        }
        (PredictorMode::BinaryOnly, _) => {
            let d = binary()?;
            Ok((d, d != Decision::Evaluate(EvaluateReason::Disabled)))
        }
        (PredictorMode::ProxyOnly, Role::Member { .. }) => {
            let zero = proxy_zero.ok_or_else(|| Error::Contract("proxy not evaluated".into()))?;
            Ok((
                if zero {
                    Decision::Skip
                } else {
                    Decision::Evaluate(EvaluateReason::ProxyNonzero)
                },
                true,
            ))
        }
        _ => Ok((Decision::Evaluate(EvaluateReason::Disabled), false)),
    }
}

/// Decision, whether it counts as a prediction, and the output code.
type Decided = (Decision, bool, i8);

/// Runs the model with the configured predictor.
pub fn hybrid_forward(hm: HybridModel<'_>, input: &QuantTensor, config: &HybridConfig) -> Result<HybridRun> {
    let HybridModel { model, clusters, params } = hm;
    clusters.validate_for(model)?;
    params.validate_for(model)?;
    if input.shape() != model.input_shape() {
        return Err(Error::shape(format!(
            "input shape {} does not match model input {}",
            input.shape(),
            model.input_shape()
        )));
    }
    let params = &*config.gated(params)?;
    let reference = match config.input_policy {
        InputPolicy::Reference => Some(forward_reference(model, input)?),
        InputPolicy::Propagate => None,
    };
    let sign_rows = binary_rows(model);
    let mut outputs: Vec<QuantTensor> = Vec::with_capacity(model.len());
    let mut layers = Vec::with_capacity(model.len());

    for (i, layer) in model.layers().iter().enumerate() {
        let (layer_input, residual) = match &reference {
            Some(rec) => (
                rec.layer_input(i),
                layer.residual.map(|tap| residual_of_record(tap, rec)),
            ),
            None => (
                if i == 0 { input } else { &outputs[i - 1] },
                layer
                    .residual
                    .map(|tap| residual_source(tap, input, &outputs)),
            ),
        };
        let ctx = LayerContext::new(layer, model.layer_input_shape(i), layer_input.data(), residual)?;
        let positions = ctx.positions();
        let n_elem = ctx.elements();
        let k = layer.row_len() as u64;
        let roles = clusters.layers[i].roles();
        let predict = config.predicts_layer(model, i);
        let lp = &params.layers[i];

        // Proxies and singletons are always evaluated at base precision.
        let mut out = vec![0i8; n_elem];
        let mut skipped = vec![false; n_elem];
        let mut binary = vec![false; n_elem];
        let mut predicted = vec![false; n_elem];
        let decided_here = |n: usize| {
            predict && (config.mode == PredictorMode::BinaryOnly || matches!(roles[n], Role::Member { .. }))
        };
        let first_pass: Vec<(usize, Vec<i8>)> = (0..layer.neurons)
            .into_par_iter()
            .filter(|&n| !decided_here(n))
            .map(|n| (n, (0..positions).map(|p| ctx.evaluate(n, p).2).collect()))
            .collect();
        for (n, codes) in first_pass {
            out[n * positions..(n + 1) * positions].copy_from_slice(&codes);
        }

        if predict {
            let windows: Vec<SignVector> = (0..positions).map(|p| binarize_vector(ctx.patches.window(p))).collect();
            let out_ref = &out;
            let decided: Vec<(usize, Vec<Decided>)> = (0..layer.neurons)
                .into_par_iter()
                .filter(|&n| decided_here(n))
                .map(|n| {
                    let row: Vec<Decided> = (0..positions)
                        .map(|p| {
                            let view = MemberView {
                                params: &lp[n],
                                weights: &sign_rows[i][n],
                                window: &windows[p],
                                bn: ctx.bn(n),
                                residual: ctx.residual(n, p),
                            };
                            let proxy_zero = match roles[n] {
                                Role::Member { proxy, .. } => Some(out_ref[proxy * positions + p] == 0),
                                _ => None,
                            };
                            let (d, counted) = decide(
                                config.mode,
                                roles[n],
                                || predict_member_zero(&view, proxy_zero),
                                || binary_only(&view),
                                proxy_zero,
                            )?;
                            let code = if d.is_skip() { 0 } else { ctx.evaluate(n, p).2 };
                            Ok((d, counted, code))
                        })
                        .collect::<Result<_>>()?;
                    Ok((n, row))
                })
                .collect::<Result<_>>()?;
            for (n, row) in decided {
                for (p, (d, counted, code)) in row.into_iter().enumerate() {
                    let e = n * positions + p;
                    out[e] = code;
                    skipped[e] = d.is_skip();
                    binary[e] = d.consulted_binary();
                    predicted[e] = counted;
                }
            }
        }

        let n_skipped = skipped.iter().filter(|&&s| s).count() as u64;
        let stats = SkipStats {
            elements: n_elem as u64,
            skipped: n_skipped,
            binary_dots: binary.iter().filter(|&&b| b).count() as u64,
            macs_executed: (n_elem as u64 - n_skipped) * k,
            macs_skipped: n_skipped * k,
        };
        let outcomes = config.oracle.then(|| {
            (0..n_elem)
                .map(|e| {
                    if !predicted[e] {
                        return Outcome::NotPredicted;
                    }
                    // Evaluated elements are already exact.
                    let actual = if skipped[e] {
                        ctx.evaluate(e / positions, e % positions).2
                    } else {
                        out[e]
                    };
                    Outcome::label(skipped[e], actual == 0)
                })
                .collect()
        });
        let output = QuantTensor::new(model.layer_output_shape(i).clone(), out, input.scale())?;
        outputs.push(output.clone());
        layers.push(HybridLayer {
            output,
            skipped,
            binary,
            outcomes,
            stats,
        });
    }
    Ok(HybridRun { layers })
}

fn binary_only(view: &MemberView<'_>) -> Result<Decision> {
    if !view.params.enabled() {
        return Ok(Decision::Evaluate(EvaluateReason::Disabled));
    }
    Ok(if view.estimate()?.is_negative() {
        Decision::Skip
    } else {
        Decision::Evaluate(EvaluateReason::EstimateNonnegative)
    })
}

/// Index of the largest code, lowest index on ties.
pub fn argmax(codes: &[i8]) -> Option<usize> {
    codes
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, &c)| c)
        .map(|(i, _)| i)
}
