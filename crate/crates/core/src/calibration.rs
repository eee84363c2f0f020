//! Offline profiling of binarized neurons.
//!
//! Each ReLU neuron (or CONV filter, pooled over output positions) is run in
//! base precision and with sign-only weights and inputs over a calibration
//! set. The paired pre-batch-norm dot products give a Pearson coefficient and
//! a least-squares line mapping the binary result onto the int8 one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::Fixed;
use crate::model::{forward_reference, LayerContext, QuantModel};
use crate::tensor::QuantTensor;

/// Bit-packed ±1 vector. A set bit marks a negative element.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignVector {
    len: usize,
    words: Vec<u64>,
}

impl SignVector {
    pub fn from_signs(signs: &[i8]) -> Self {
        let mut words = vec![0u64; signs.len().div_ceil(64)];
        for (i, &s) in signs.iter().enumerate() {
            if s < 0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        SignVector {
            len: signs.len(),
            words,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> i8 {
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            -1
        } else {
            1
        }
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

/// Sign-bit extraction: `-1` for negative codes, `+1` otherwise (including 0).
pub fn binarize_vector(v: &[i8]) -> SignVector {
    let mut words = vec![0u64; v.len().div_ceil(64)];
    for (i, &x) in v.iter().enumerate() {
        words[i / 64] |= ((x as u8 >> 7) as u64) << (i % 64);
    }
    SignVector { len: v.len(), words }
}

/// `sum(a[i] * b[i])` over ±1 vectors, as `n - 2 * popcount(a ^ b)`.
pub fn binary_dot(a: &SignVector, b: &SignVector) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::LengthMismatch {
            left: a.len,
            right: b.len,
        });
    }
    if a.len == 0 {
        return Err(Error::shape("binary dot product of empty vectors"));
    }
    Ok(binary_dot_unchecked(a, b))
}

#[inline]
pub(crate) fn binary_dot_unchecked(a: &SignVector, b: &SignVector) -> i32 {
    let differing: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum();
    a.len as i32 - 2 * differing as i32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub c: f64,
    /// Set when either series has zero variance; `c` is then 0.
    pub degenerate: bool,
}

fn check_series(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::shape("series need at least two points"));
    }
    Ok(())
}

fn centered_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    (mx, my, sxx, syy, sxy)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_series(x, y)?;
    let (_, _, sxx, syy, sxy) = centered_sums(x, y);
    Ok(correlation_from(sxx, syy, sxy))
}

fn correlation_from(sxx: f64, syy: f64, sxy: f64) -> Correlation {
    if sxx <= 0.0 || syy <= 0.0 {
        return Correlation {
            c: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        c: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Least-squares line `y = m * x + b`.
pub fn linfit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_series(x, y)?;
    let (mx, my, sxx, _, sxy) = centered_sums(x, y);
    if sxx <= 0.0 {
        return Err(Error::DegenerateFit("x has zero variance"));
    }
    let m = sxy / sxx;
    Ok((m, my - m * mx))
}

/// Fitted line and correlation of one neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictorParams {
    /// Pearson coefficient, Q1.30.
    c_raw: i32,
    m: Fixed,
    b: Fixed,
    enabled: bool,
}

const C_ONE: f64 = (1u32 << 30) as f64;

impl PredictorParams {
    pub fn new(c: f64, m: f64, b: f64, threshold: f64) -> Self {
        let mut p = PredictorParams {
            c_raw: (c.clamp(-1.0, 1.0) * C_ONE).round() as i32,
            m: Fixed::from_f64(m),
            b: Fixed::from_f64(b),
            enabled: false,
        };
        p.enabled = p.enabled_at(threshold);
        p
    }

    pub fn disabled() -> Self {
        PredictorParams {
            c_raw: 0,
            m: Fixed::ZERO,
            b: Fixed::ZERO,
            enabled: false,
        }
    }

    pub fn from_raw(c_raw: i32, m: Fixed, b: Fixed, enabled: bool) -> Self {
        PredictorParams { c_raw, m, b, enabled }
    }

    pub fn c(&self) -> f64 {
        self.c_raw as f64 / C_ONE
    }

    pub fn c_raw(&self) -> i32 {
        self.c_raw
    }

    pub fn m(&self) -> Fixed {
        self.m
    }

    pub fn b(&self) -> Fixed {
        self.b
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// The gate a threshold `t` applies: the binary path is trusted only when
    /// `c > t`. At `t = 1` nothing passes.
    pub fn enabled_at(&self, t: f64) -> bool {
        self.c() > t
    }

    pub fn with_threshold(mut self, t: f64) -> Self {
        self.enabled = self.enabled_at(t);
        self
    }

    /// `m * p_bin + b`.
    pub fn line(&self, p_bin: i32) -> Fixed {
        Fixed::from_raw(self.m.raw().saturating_mul(p_bin as i64).saturating_add(self.b.raw()))
    }
}

/// Paired pre-batch-norm dot products of one neuron.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CalibrationTrace {
    pub p_bin: Vec<i32>,
    pub p_base: Vec<i32>,
}

impl CalibrationTrace {
    pub fn push(&mut self, p_bin: i32, p_base: i32) {
        self.p_bin.push(p_bin);
        self.p_base.push(p_base);
    }

    pub fn len(&self) -> usize {
        self.p_bin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_bin.is_empty()
    }

    /// Fits the series directly. Degenerate traces give a disabled predictor.
    pub fn fit(&self, threshold: f64) -> Result<PredictorParams> {
        let x: Vec<f64> = self.p_bin.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = self.p_base.iter().map(|&v| v as f64).collect();
        let corr = pearson(&x, &y)?;
        if corr.degenerate {
            return Ok(PredictorParams::disabled());
        }
        let (m, b) = linfit(&x, &y)?;
        Ok(PredictorParams::new(corr.c, m, b, threshold))
    }
}

/// Exact running sums of a paired integer series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairMoments {
    pub n: u64,
    pub sx: i128,
    pub sy: i128,
    pub sxx: i128,
    pub syy: i128,
    pub sxy: i128,
}

impl PairMoments {
    pub fn push(&mut self, x: i64, y: i64) {
        let (x, y) = (x as i128, y as i128);
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    pub fn merge(&mut self, o: &PairMoments) {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.syy += o.syy;
        self.sxy += o.sxy;
    }

    /// `n`-scaled centered sums, computed exactly.
    fn scaled_centered(&self) -> (i128, i128, i128) {
        let n = self.n as i128;
        (
            n * self.sxx - self.sx * self.sx,
            n * self.syy - self.sy * self.sy,
            n * self.sxy - self.sx * self.sy,
        )
    }

    pub fn correlation(&self) -> Correlation {
        if self.n < 2 {
            return Correlation {
                c: 0.0,
                degenerate: true,
            };
        }
        let (sxx, syy, sxy) = self.scaled_centered();
        correlation_from(sxx as f64, syy as f64, sxy as f64)
    }

    pub fn fit(&self, threshold: f64) -> PredictorParams {
        let corr = self.correlation();
        if corr.degenerate {
            return PredictorParams::disabled();
        }
        let (sxx, _, sxy) = self.scaled_centered();
        let m = sxy as f64 / sxx as f64;
        let b = (self.sy as f64 - m * self.sx as f64) / self.n as f64;
        PredictorParams::new(corr.c, m, b, threshold)
    }
}

/// Per-layer, per-neuron predictor parameters plus the threshold that set
/// their `enabled` flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorTable {
    pub threshold: f64,
    pub layers: Vec<Vec<PredictorParams>>,
}

impl PredictorTable {
    /// Re-gates every neuron at threshold `t`.
    pub fn with_threshold(&self, t: f64) -> Result<Self> {
        check_threshold(t)?;
        Ok(PredictorTable {
            threshold: t,
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|p| p.with_threshold(t)).collect())
                .collect(),
        })
    }

    pub fn enabled_count(&self) -> usize {
        self.layers.iter().flatten().filter(|p| p.enabled()).count()
    }

    pub fn validate_for(&self, model: &QuantModel) -> Result<()> {
        if self.layers.len() != model.len() {
            return Err(Error::config(format!(
                "predictor table has {} layers, model has {}",
                self.layers.len(),
                model.len()
            )));
        }
        for (i, (l, p)) in model.layers().iter().zip(&self.layers).enumerate() {
            if l.neurons != p.len() {
                return Err(Error::config(format!(
                    "layer {i}: {} predictor entries for {} neurons",
                    p.len(),
                    l.neurons
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

/// Binarized weight rows of every layer.
pub(crate) fn binary_rows(model: &QuantModel) -> Vec<Vec<SignVector>> {
    model
        .layers()
        .iter()
        .map(|l| l.rows().take(l.neurons).map(binarize_vector).collect())
        .collect()
}

/// Visits `(layer, neuron, position, p_bin, p_base)` for every ReLU element
/// of one sample.
fn for_each_pair(
    model: &QuantModel,
    rows: &[Vec<SignVector>],
    sample: &QuantTensor,
    mut f: impl FnMut(usize, usize, i32, i32),
) -> Result<()> {
    let record = forward_reference(model, sample)?;
    for (i, layer) in model.layers().iter().enumerate() {
        if !layer.relu {
            continue;
        }
        let input = record.layer_input(i);
        let ctx = LayerContext::new(layer, model.layer_input_shape(i), input.data(), None)?;
        let positions = ctx.positions();
        let windows: Vec<SignVector> = (0..positions)
            .map(|p| binarize_vector(ctx.patches.window(p)))
            .collect();
        let acc = &record.layers[i].acc;
        for (n, row) in rows[i].iter().enumerate() {
            for (p, win) in windows.iter().enumerate() {
                f(i, n, binary_dot_unchecked(row, win), acc[n * positions + p]);
            }
        }
    }
    Ok(())
}

fn check_samples(model: &QuantModel, samples: &[QuantTensor]) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::config(format!(
            "calibration needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.shape() != model.input_shape()) {
        return Err(Error::config(format!(
            "calibration sample shape {} does not match model input {}",
            bad.shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

/// Explicit traces for one layer (for inspection; `calibrate_model` streams).
pub fn collect_layer_traces(
    model: &QuantModel,
    samples: &[QuantTensor],
    layer: usize,
) -> Result<Vec<CalibrationTrace>> {
    check_samples(model, samples)?;
    let rows = binary_rows(model);
    let mut traces = vec![CalibrationTrace::default(); model.layer(layer).neurons];
    for s in samples {
        for_each_pair(model, &rows, s, |i, n, pb, pa| {
            if i == layer {
                traces[n].push(pb, pa);
            }
        })?;
    }
    Ok(traces)
}

/// Fits `(c, m, b, enabled)` for every neuron. Non-ReLU layers are disabled.
pub fn calibrate_model(model: &QuantModel, samples: &[QuantTensor], threshold: f64) -> Result<PredictorTable> {
    check_threshold(threshold)?;
    check_samples(model, samples)?;
    let rows = binary_rows(model);
    let empty = || -> Vec<Vec<PairMoments>> {
        model
            .layers()
            .iter()
            .map(|l| vec![PairMoments::default(); if l.relu { l.neurons } else { 0 }])
            .collect()
    };
    let merge = |mut a: Vec<Vec<PairMoments>>, b: Vec<Vec<PairMoments>>| {
        for (la, lb) in a.iter_mut().zip(&b) {
            for (ma, mb) in la.iter_mut().zip(lb) {
                ma.merge(mb);
            }
        }
        a
    };
    // Integer sums are exact, so the parallel reduction order cannot change
    // the result.
    let moments = samples
        .par_iter()
        .map(|s| {
            let mut m = empty();
            for_each_pair(model, &rows, s, |i, n, pb, pa| m[i][n].push(pb as i64, pa as i64))?;
            Ok::<_, Error>(m)
        })
        .try_reduce(empty, |a, b| Ok(merge(a, b)))?;

    let layers = model
        .layers()
        .iter()
        .zip(moments)
        .map(|(l, ms)| {
            if l.relu {
                ms.iter().map(|m| m.fit(threshold)).collect()
            } else {
                vec![PredictorParams::disabled(); l.neurons]
            }
        })
        .collect();
    Ok(PredictorTable { threshold, layers })
}
