//! Seeded synthetic models and inputs for tests, sweeps and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fixed::BnParams;
use crate::model::{ConvGeometry, LayerDesc, QuantModel, ResidualTap};
use crate::tensor::{QuantTensor, Shape};

/// Uniform codes in `[-range, range]`.
pub fn random_input(rng: &mut impl Rng, shape: &Shape, range: i8) -> QuantTensor {
    let r = range.clamp(0, 127);
    let data = (0..shape.numel()).map(|_| rng.random_range(-r..=r)).collect();
    QuantTensor::new(shape.clone(), data, crate::tensor::Scale::UNIT).expect("length matches shape")
}

/// Random `+-magnitude` codes.
pub fn random_signs(rng: &mut impl Rng, shape: &Shape, magnitude: i8) -> QuantTensor {
    let data = (0..shape.numel())
        .map(|_| if rng.random() { magnitude } else { -magnitude })
        .collect();
    QuantTensor::new(shape.clone(), data, crate::tensor::Scale::UNIT).expect("length matches shape")
}

/// Shift that maps a dot product of `k` terms with the given code spreads
/// back to roughly `[-64, 64]`.
fn shift_for(k: usize, w_range: i32, x_range: i32) -> u8 {
    let sd = (k as f64).sqrt() * (w_range as f64 / 3f64.sqrt()) * (x_range as f64 / 3f64.sqrt());
    (sd / 48.0).max(1.0).log2().ceil().clamp(0.0, 30.0) as u8
}

#[derive(Clone, Copy, Debug)]
pub struct RandomModelSpec {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_neurons: usize,
    pub max_inputs: usize,
    pub allow_conv: bool,
    pub allow_bn: bool,
    pub allow_residual: bool,
}

impl Default for RandomModelSpec {
    fn default() -> Self {
        RandomModelSpec {
            min_layers: 2,
            max_layers: 5,
            max_neurons: 256,
            max_inputs: 64,
            allow_conv: true,
            allow_bn: true,
            allow_residual: true,
        }
    }
}

fn random_bn(rng: &mut impl Rng, n: usize) -> Vec<BnParams> {
    (0..n)
        .map(|_| {
            BnParams::from_f64(
                rng.random_range(-200.0..200.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.25..2.0),
                rng.random_range(-50.0..50.0),
            )
        })
        .collect()
}

/// Random layer chain. Layers mix ReLU and linear outputs so that later
/// ReLU layers also see signed inputs.
pub fn random_model(rng: &mut impl Rng, spec: &RandomModelSpec) -> QuantModel {
    let n_layers = rng.random_range(spec.min_layers..=spec.max_layers);
    let mut layers: Vec<LayerDesc> = Vec::with_capacity(n_layers);
    let conv = spec.allow_conv && rng.random_bool(0.3);
    let input_shape = if conv {
        Shape::new(vec![rng.random_range(1..=3), rng.random_range(3..=6), rng.random_range(3..=6)])
    } else {
        Shape::new(vec![rng.random_range(2..=spec.max_inputs.max(2))])
    };
    let mut shape = input_shape.clone();
    let mut shapes: Vec<Shape> = Vec::new();
    for i in 0..n_layers {
        let w_range = rng.random_range(4..=64);
        let x_range = 64;
        let mut layer = if i == 0 && conv {
            let g = ConvGeometry {
                in_channels: shape.dims()[0],
                kernel_h: rng.random_range(1..=3),
                kernel_w: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=1),
            };
            let filters = rng.random_range(1..=8);
            let k = g.in_channels * g.kernel_h * g.kernel_w;
            let w = (0..filters * k).map(|_| rng.random_range(-w_range..=w_range) as i8).collect();
            LayerDesc::conv(filters, g, w).expect("sizes agree").with_shift(shift_for(k, w_range, x_range))
        } else {
            let k = shape.numel();
            let n = rng.random_range(1..=spec.max_neurons);
            let w = (0..n * k).map(|_| rng.random_range(-w_range..=w_range) as i8).collect();
            LayerDesc::fc(n, k, w).expect("sizes agree").with_shift(shift_for(k, w_range, x_range))
        };
        layer = layer.with_relu(i + 1 < n_layers && rng.random_bool(0.6));
        if spec.allow_bn && rng.random_bool(0.3) {
            let bn = random_bn(rng, layer.neurons);
            layer = layer.with_bn(bn);
        }
        let out = layer.output_shape(&shape).expect("chain is consistent");
        if spec.allow_residual && rng.random_bool(0.3) {
            let taps: Vec<ResidualTap> = std::iter::once((&input_shape, ResidualTap::Input))
                .chain(shapes.iter().enumerate().map(|(j, s)| (s, ResidualTap::Layer(j))))
                .filter(|(s, _)| **s == out)
                .map(|(_, t)| t)
                .collect();
            if !taps.is_empty() {
                layer = layer.with_residual(taps[rng.random_range(0..taps.len())]);
            }
        }
        shapes.push(out.clone());
        shape = out;
        layers.push(layer);
    }
    QuantModel::new(input_shape, layers).expect("generator builds valid models")
}

/// `clusters` groups of `size` rows each, every row a jittered copy of its
/// group's base direction.
pub fn clustered_weights(rng: &mut impl Rng, clusters: usize, size: usize, k: usize, range: i32, jitter: i32) -> Vec<i8> {
    let mut w = Vec::with_capacity(clusters * size * k);
    for _ in 0..clusters {
        let base: Vec<i32> = (0..k).map(|_| rng.random_range(-range..=range)).collect();
        for _ in 0..size {
            w.extend(
                base.iter()
                    .map(|&b| (b + rng.random_range(-jitter..=jitter)).clamp(-127, 127) as i8),
            );
        }
    }
    w
}

/// Model where the predictor has something to work with: two ReLU layers
/// fed by signed activations, with clustered weights of mixed quality.
pub fn sweep_fixture(seed: u64) -> QuantModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k0 = 48;
    let l0 = LayerDesc::fc(128, k0, clustered_weights(&mut rng, 32, 4, k0, 48, 10))
        .expect("sizes agree")
        .with_relu(true)
        .with_shift(shift_for(k0, 48, 64));
    let w1: Vec<i8> = (0..64 * 128).map(|_| rng.random_range(-24i8..=24)).collect();
    let l1 = LayerDesc::fc(64, 128, w1).expect("sizes agree").with_shift(shift_for(128, 24, 32));
    let l2 = LayerDesc::fc(96, 64, clustered_weights(&mut rng, 24, 4, 64, 40, 14))
        .expect("sizes agree")
        .with_relu(true)
        .with_shift(shift_for(64, 40, 48));
    let w3: Vec<i8> = (0..10 * 96).map(|_| rng.random_range(-32i8..=32)).collect();
    let l3 = LayerDesc::fc(10, 96, w3).expect("sizes agree").with_shift(shift_for(96, 32, 32));
    QuantModel::new(Shape::new(vec![k0]), vec![l0, l1, l2, l3]).expect("fixture is valid")
}

/// High-sparsity workload: a wide ReLU layer made of identical 8-row
/// clusters of uniform-magnitude weights, fed `+-1` inputs, so every neuron
/// is an exact multiple of its binary counterpart. A small linear head
/// follows.
pub fn sparse_workload(seed: u64, inputs: usize, neurons: usize) -> QuantModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = 8;
    let mut w = Vec::with_capacity(neurons * inputs);
    for _ in 0..neurons.div_ceil(group) {
        let signs: Vec<i8> = (0..inputs).map(|_| if rng.random() { 1 } else { -1 }).collect();
        let mag = rng.random_range(8i8..=40);
        for _ in 0..group {
            w.extend(signs.iter().map(|&s| s * mag));
        }
    }
    w.truncate(neurons * inputs);
    let l0 = LayerDesc::fc(neurons, inputs, w)
        .expect("sizes agree")
        .with_relu(true)
        .with_shift(shift_for(inputs, 40, 2));
    let head: Vec<i8> = (0..16 * neurons).map(|_| rng.random_range(-16i8..=16)).collect();
    let l1 = LayerDesc::fc(16, neurons, head).expect("sizes agree").with_shift(shift_for(neurons, 16, 32));
    QuantModel::new(Shape::new(vec![inputs]), vec![l0, l1]).expect("fixture is valid")
}

/// Seeded batch of uniform inputs for `model`.
pub fn input_batch(model: &QuantModel, count: usize, range: i8, seed: u64) -> Vec<QuantTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_input(&mut rng, model.input_shape(), range)).collect()
}

/// Seeded batch of `+-magnitude` inputs.
pub fn sign_batch(model: &QuantModel, count: usize, magnitude: i8, seed: u64) -> Vec<QuantTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_signs(&mut rng, model.input_shape(), magnitude)).collect()
}
