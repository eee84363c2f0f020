use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::fixed::{requantize, residual_to_fixed, BnAffine, Fixed};
use crate::model::{LayerDesc, LayerKind, QuantModel, ResidualTap};
use crate::tensor::{QuantTensor, Shape};

/// Exact int8 dot product with 32-bit accumulation.
pub fn dot_product(weights: &[i8], inputs: &[i8]) -> Result<i32> {
    if weights.len() != inputs.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: inputs.len(),
        });
    }
    if weights.is_empty() {
        return Err(Error::shape("dot product of empty vectors"));
    }
    Ok(dot_i8(weights, inputs))
}

#[inline]
pub(crate) fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// Input windows of a layer, one row of `row_len` codes per output position.
pub(crate) struct Patches<'a> {
    pub positions: usize,
    pub row_len: usize,
    pub data: Cow<'a, [i8]>,
}

impl<'a> Patches<'a> {
    pub fn build(layer: &LayerDesc, input_shape: &Shape, input: &'a [i8]) -> Result<Self> {
        let row_len = layer.row_len();
        match layer.kind {
            LayerKind::Fc => Ok(Patches {
                positions: 1,
                row_len,
                data: Cow::Borrowed(input),
            }),
            LayerKind::Conv(g) => {
                let out = layer.output_shape(input_shape)?;
                let (h, w) = (input_shape.dims()[1], input_shape.dims()[2]);
                let (ho, wo) = (out.dims()[1], out.dims()[2]);
                let mut data = Vec::with_capacity(ho * wo * row_len);
                for oy in 0..ho {
                    for ox in 0..wo {
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                for kx in 0..g.kernel_w {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                                    data.push(if inside {
                                        input[(c * h + iy as usize) * w + ix as usize]
                                    } else {
                                        0
                                    });
                                }
                            }
                        }
                    }
                }
                Ok(Patches {
                    positions: ho * wo,
                    row_len,
                    data: Cow::Owned(data),
                })
            }
        }
    }

    pub fn window(&self, position: usize) -> &[i8] {
        &self.data[position * self.row_len..(position + 1) * self.row_len]
    }
}

/// Everything needed to evaluate single output elements of one layer.
pub(crate) struct LayerContext<'a> {
    pub layer: &'a LayerDesc,
    pub patches: Patches<'a>,
    bn: Option<Vec<BnAffine>>,
    residual: Option<&'a [i8]>,
}

impl<'a> LayerContext<'a> {
    pub fn new(
        layer: &'a LayerDesc,
        input_shape: &Shape,
        input: &'a [i8],
        residual: Option<&'a [i8]>,
    ) -> Result<Self> {
        let patches = Patches::build(layer, input_shape, input)?;
        let bn = layer
            .bn
            .as_ref()
            .map(|ps| ps.iter().map(|p| p.fold()).collect::<Result<Vec<_>>>())
            .transpose()?;
        if let Some(r) = residual {
            if r.len() != layer.neurons * patches.positions {
                return Err(Error::shape("residual input does not match layer output"));
            }
        }
        Ok(LayerContext {
            layer,
            patches,
            bn,
            residual,
        })
    }

    pub fn positions(&self) -> usize {
        self.patches.positions
    }

    pub fn elements(&self) -> usize {
        self.layer.neurons * self.patches.positions
    }

    pub fn acc(&self, neuron: usize, position: usize) -> i32 {
        dot_i8(self.layer.row(neuron), self.patches.window(position))
    }

    pub fn bn(&self, neuron: usize) -> Option<&BnAffine> {
        self.bn.as_ref().map(|b| &b[neuron])
    }

    /// Residual contribution in pre-activation units, if the layer has one.
    pub fn residual(&self, neuron: usize, position: usize) -> Option<Fixed> {
        self.residual
            .map(|r| residual_to_fixed(r[neuron * self.patches.positions + position], self.layer.out_shift))
    }

    /// Batch norm then residual, applied to any pre-BN value.
    pub fn post_dot(&self, neuron: usize, position: usize, x: Fixed) -> Fixed {
        let mut v = match self.bn(neuron) {
            Some(bn) => bn.apply(x),
            None => x,
        };
        if let Some(r) = self.residual(neuron, position) {
            v = v.saturating_add(r);
        }
        v
    }

    pub fn pre(&self, neuron: usize, position: usize, acc: i32) -> Fixed {
        self.post_dot(neuron, position, Fixed::from_int(acc as i64))
    }

    pub fn output(&self, pre: Fixed) -> i8 {
        requantize(pre, self.layer.out_shift, self.layer.relu)
    }

    /// Full base-precision evaluation of one element.
    pub fn evaluate(&self, neuron: usize, position: usize) -> (i32, Fixed, i8) {
        let acc = self.acc(neuron, position);
        let pre = self.pre(neuron, position, acc);
        (acc, pre, self.output(pre))
    }
}

/// Activations of one layer, neuron-major (`[N]` or `[F, Ho, Wo]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerActivation {
    /// Raw dot products, before batch norm and residual.
    pub acc: Vec<i32>,
    /// ReLU inputs.
    pub pre: Vec<Fixed>,
    pub output: QuantTensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationRecord {
    pub input: QuantTensor,
    pub layers: Vec<LayerActivation>,
}

impl ActivationRecord {
    /// The tensor consumed by layer `i`.
    pub fn layer_input(&self, i: usize) -> &QuantTensor {
        if i == 0 {
            &self.input
        } else {
            &self.layers[i - 1].output
        }
    }

    pub fn output(&self) -> &QuantTensor {
        self.layers.last().map(|l| &l.output).unwrap_or(&self.input)
    }

    /// Negative ReLU inputs over all ReLU layers: `(negative, total)`.
    pub fn negative_relu_inputs(&self, model: &QuantModel) -> (u64, u64) {
        let mut neg = 0;
        let mut total = 0;
        for (layer, act) in model.layers().iter().zip(&self.layers) {
            if layer.relu {
                neg += act.pre.iter().filter(|p| p.is_negative()).count() as u64;
                total += act.pre.len() as u64;
            }
        }
        (neg, total)
    }
}

pub(crate) fn residual_source<'a>(
    tap: ResidualTap,
    input: &'a QuantTensor,
    outputs: &'a [QuantTensor],
) -> &'a [i8] {
    match tap {
        ResidualTap::Input => input.data(),
        ResidualTap::Layer(j) => outputs[j].data(),
    }
}

pub(crate) fn residual_of_record(tap: ResidualTap, record: &ActivationRecord) -> &[i8] {
    match tap {
        ResidualTap::Input => record.input.data(),
        ResidualTap::Layer(j) => record.layers[j].output.data(),
    }
}

/// Deterministic base-precision inference recording every layer's ReLU
/// inputs and outputs.
pub fn forward_reference(model: &QuantModel, input: &QuantTensor) -> Result<ActivationRecord> {
    if input.shape() != model.input_shape() {
        return Err(Error::shape(format!(
            "input shape {} does not match model input {}",
            input.shape(),
            model.input_shape()
        )));
    }
    let mut outputs: Vec<QuantTensor> = Vec::with_capacity(model.len());
    let mut layers = Vec::with_capacity(model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        let layer_input = if i == 0 { input } else { &outputs[i - 1] };
        let residual = layer.residual.map(|tap| residual_source(tap, input, &outputs));
        let ctx = LayerContext::new(layer, model.layer_input_shape(i), layer_input.data(), residual)?;
        let n = ctx.elements();
        let positions = ctx.positions();
        let mut acc = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for neuron in 0..layer.neurons {
            for p in 0..positions {
                let (a, v, o) = ctx.evaluate(neuron, p);
                acc.push(a);
                pre.push(v);
                out.push(o);
            }
        }
        let output = QuantTensor::new(model.layer_output_shape(i).clone(), out, input.scale())?;
        outputs.push(output.clone());
        layers.push(LayerActivation { acc, pre, output });
    }
    Ok(ActivationRecord {
        input: input.clone(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::BnParams;
    use crate::model::ConvGeometry;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_product_examples() {
        assert_eq!(dot_product(&[1, 2, 3], &[4, 5, 6]).unwrap(), 32);
        assert_eq!(dot_product(&[0, 0], &[127, -128]).unwrap(), 0);
        assert!(matches!(
            dot_product(&[1, 2], &[1]),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn dot_product_matches_wide_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<i8> = (0..256).map(|_| rng.random()).collect();
        let b: Vec<i8> = (0..256).map(|_| rng.random()).collect();
        let wide: i128 = a.iter().zip(&b).map(|(&x, &y)| x as i128 * y as i128).sum();
        assert_eq!(dot_product(&a, &b).unwrap() as i128, wide);
    }

    #[test]
    fn dot_product_extreme_length_does_not_saturate() {
        let a = vec![-128i8; 1 << 15];
        let b = vec![-128i8; 1 << 15];
        assert_eq!(dot_product(&a, &b).unwrap() as i64, (1i64 << 15) * 16384);
    }

    #[test]
    fn single_fc_negative_input_is_cut() {
        let layer = LayerDesc::fc(1, 2, vec![1, -1]).unwrap().with_relu(true);
        let model = QuantModel::new(Shape::new(vec![2]), vec![layer]).unwrap();
        let x = QuantTensor::from_codes(&[2], vec![3, 5]).unwrap();
        let rec = forward_reference(&model, &x).unwrap();
        assert_eq!(rec.layers[0].pre, vec![Fixed::from_int(-2)]);
        assert_eq!(rec.layers[0].output.data(), &[0]);
    }

    #[test]
    fn identity_fc_passes_nonnegative_codes() {
        let n = 6;
        let mut w = vec![0i8; n * n];
        for i in 0..n {
            w[i * n + i] = 1;
        }
        let layer = LayerDesc::fc(n, n, w).unwrap().with_relu(true);
        let model = QuantModel::new(Shape::new(vec![n]), vec![layer]).unwrap();
        let x = QuantTensor::from_codes(&[n], vec![0, 1, 5, 64, 127, 3]).unwrap();
        let rec = forward_reference(&model, &x).unwrap();
        assert_eq!(rec.output().data(), x.data());
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let layer = LayerDesc::fc(1, 2, vec![1, -1]).unwrap();
        let model = QuantModel::new(Shape::new(vec![2]), vec![layer]).unwrap();
        let x = QuantTensor::from_codes(&[3], vec![3, 5, 1]).unwrap();
        assert!(matches!(forward_reference(&model, &x), Err(Error::Shape(_))));
    }

    /// Direct nested-loop convolution; shares nothing with `Patches`.
    fn naive_conv(
        input: &[i8],
        (c, h, w): (usize, usize, usize),
        weights: &[i8],
        f: usize,
        g: ConvGeometry,
    ) -> (Vec<i64>, usize, usize) {
        let ho = (h + 2 * g.padding - g.kernel_h) / g.stride + 1;
        let wo = (w + 2 * g.padding - g.kernel_w) / g.stride + 1;
        let mut out = vec![0i64; f * ho * wo];
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0i64;
                    for ci in 0..c {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as i64 - g.padding as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let wv = weights[((fi * c + ci) * g.kernel_h + ky) * g.kernel_w + kx] as i64;
                                let xv = input[(ci * h + iy as usize) * w + ix as usize] as i64;
                                s += wv * xv;
                            }
                        }
                    }
                    out[(fi * ho + oy) * wo + ox] = s;
                }
            }
        }
        (out, ho, wo)
    }

    fn naive_requant(v: i64, shift: u8, relu: bool) -> i8 {
        let v = if relu { v.max(0) } else { v };
        let d = 1i64 << shift;
        let q = if v >= 0 { (v + d / 2) / d } else { -((-v + d / 2) / d) };
        q.clamp(-128, 127) as i8
    }

    #[test]
    fn conv_then_fc_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeometry {
            in_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let f = 5;
        let wc: Vec<i8> = (0..f * 27).map(|_| rng.random_range(-127..=127)).collect();
        let conv = LayerDesc::conv(f, g, wc.clone()).unwrap().with_relu(true).with_shift(6);
        let fc_in = f * 4 * 4;
        let wf: Vec<i8> = (0..7 * fc_in).map(|_| rng.random_range(-127..=127)).collect();
        let fc = LayerDesc::fc(7, fc_in, wf.clone()).unwrap().with_shift(7);
        let model = QuantModel::new(Shape::new(vec![3, 8, 7]), vec![conv, fc]).unwrap();
        let x: Vec<i8> = (0..3 * 8 * 7).map(|_| rng.random()).collect();
        let rec = forward_reference(&model, &QuantTensor::from_codes(&[3, 8, 7], x.clone()).unwrap()).unwrap();

        let (acc1, ho, wo) = naive_conv(&x, (3, 8, 7), &wc, f, g);
        assert_eq!((ho, wo), (4, 4));
        let out1: Vec<i8> = acc1.iter().map(|&v| naive_requant(v, 6, true)).collect();
        assert_eq!(rec.layers[0].acc.iter().map(|&a| a as i64).collect::<Vec<_>>(), acc1);
        assert_eq!(rec.layers[0].output.data(), &out1[..]);

        let out2: Vec<i8> = (0..7)
            .map(|n| {
                let s: i64 = (0..fc_in).map(|k| wf[n * fc_in + k] as i64 * out1[k] as i64).sum();
                naive_requant(s, 7, false)
            })
            .collect();
        assert_eq!(rec.layers[1].output.data(), &out2[..]);
    }

    #[test]
    fn batchnorm_and_residual_follow_block_order() {
        // pre = BN(acc) + residual, then ReLU.
        let bn = BnParams::from_f64(2.0, 2.0, 1.0, 0.0);
        let l0 = LayerDesc::fc(2, 2, vec![1, 0, 0, 1]).unwrap();
        let l1 = LayerDesc::fc(2, 2, vec![1, 0, 0, 1])
            .unwrap()
            .with_bn(vec![bn, bn])
            .with_residual(ResidualTap::Layer(0))
            .with_relu(true);
        let model = QuantModel::new(Shape::new(vec![2]), vec![l0, l1]).unwrap();
        let rec = forward_reference(&model, &QuantTensor::from_codes(&[2], vec![-4, 10]).unwrap()).unwrap();
        // neuron 0: (-4-2)/2 = -3, + residual -4 = -7 -> 0; neuron 1: (10-2)/2 = 4, +10 = 14.
        assert_eq!(rec.layers[1].pre, vec![Fixed::from_int(-7), Fixed::from_int(14)]);
        assert_eq!(rec.layers[1].output.data(), &[0, 14]);
    }

    proptest! {
        #[test]
        fn relu_layers_never_emit_negatives(
            w in proptest::collection::vec(-127i8..=127, 24),
            x in proptest::collection::vec(any::<i8>(), 6),
            shift in 0u8..6,
        ) {
            let layer = LayerDesc::fc(4, 6, w).unwrap().with_relu(true).with_shift(shift);
            let model = QuantModel::new(Shape::new(vec![6]), vec![layer]).unwrap();
            let rec = forward_reference(&model, &QuantTensor::from_codes(&[6], x).unwrap()).unwrap();
            prop_assert!(rec.output().data().iter().all(|&v| v >= 0));
        }

        #[test]
        fn pointwise_conv_equals_fc_per_position(
            w in proptest::collection::vec(-127i8..=127, 3 * 4),
            x in proptest::collection::vec(any::<i8>(), 4 * 3 * 5),
        ) {
            let g = ConvGeometry { in_channels: 4, kernel_h: 1, kernel_w: 1, stride: 1, padding: 0 };
            let conv = LayerDesc::conv(3, g, w.clone()).unwrap().with_relu(true).with_shift(3);
            let cm = QuantModel::new(Shape::new(vec![4, 3, 5]), vec![conv]).unwrap();
            let rec = forward_reference(&cm, &QuantTensor::from_codes(&[4, 3, 5], x.clone()).unwrap()).unwrap();

            let fc = LayerDesc::fc(3, 4, w).unwrap().with_relu(true).with_shift(3);
            let fm = QuantModel::new(Shape::new(vec![4]), vec![fc]).unwrap();
            for pos in 0..15 {
                let px: Vec<i8> = (0..4).map(|c| x[c * 15 + pos]).collect();
                let r = forward_reference(&fm, &QuantTensor::from_codes(&[4], px).unwrap()).unwrap();
                for f in 0..3 {
                    prop_assert_eq!(rec.output().data()[f * 15 + pos], r.output().data()[f]);
                }
            }
        }
    }

    #[test]
    fn reference_is_pure_across_threads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<i8> = (0..32 * 48).map(|_| rng.random_range(-127..=127)).collect();
        let layer = LayerDesc::fc(32, 48, w).unwrap().with_relu(true).with_shift(8);
        let model = QuantModel::new(Shape::new(vec![48]), vec![layer]).unwrap();
        let x = QuantTensor::from_codes(&[48], (0..48).map(|_| rng.random()).collect()).unwrap();
        let first = forward_reference(&model, &x).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (m, x) = (model.clone(), x.clone());
                std::thread::spawn(move || forward_reference(&m, &x).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), first);
        }
    }
}
