//! Layer graph and the deterministic int8 reference engine.

mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::BnParams;
use crate::tensor::{Scale, Shape};

pub use forward::{dot_product, forward_reference, ActivationRecord, LayerActivation};
pub(crate) use forward::{residual_of_record, residual_source, LayerContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Fc,
    Conv(ConvGeometry),
}

/// Where a residual input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualTap {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub neurons: usize,
    /// `neurons` rows of `row_len` weights each. Codes are in `[-127, 127]`.
    pub weights: Vec<i8>,
    pub weight_scale: Scale,
    pub bn: Option<Vec<BnParams>>,
    pub residual: Option<ResidualTap>,
    pub relu: bool,
    /// Requantization: output code = round(pre / 2^out_shift).
    pub out_shift: u8,
}

impl LayerDesc {
    pub fn fc(neurons: usize, in_features: usize, weights: Vec<i8>) -> Result<Self> {
        if weights.len() != neurons * in_features {
            return Err(Error::shape(format!(
                "FC weights have {} codes, expected {neurons}x{in_features}",
                weights.len()
            )));
        }
        Ok(LayerDesc {
            kind: LayerKind::Fc,
            neurons,
            weights,
            weight_scale: Scale::UNIT,
            bn: None,
            residual: None,
            relu: false,
            out_shift: 0,
        })
    }

    pub fn conv(filters: usize, geometry: ConvGeometry, weights: Vec<i8>) -> Result<Self> {
        let k = geometry.in_channels * geometry.kernel_h * geometry.kernel_w;
        if weights.len() != filters * k {
            return Err(Error::shape(format!(
                "CONV weights have {} codes, expected {filters}x{k}",
                weights.len()
            )));
        }
        Ok(LayerDesc {
            kind: LayerKind::Conv(geometry),
            neurons: filters,
            weights,
            weight_scale: Scale::UNIT,
            bn: None,
            residual: None,
            relu: false,
            out_shift: 0,
        })
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    pub fn with_bn(mut self, bn: Vec<BnParams>) -> Self {
        self.bn = Some(bn);
        self
    }

    pub fn with_residual(mut self, tap: ResidualTap) -> Self {
        self.residual = Some(tap);
        self
    }

    pub fn with_shift(mut self, shift: u8) -> Self {
        self.out_shift = shift;
        self
    }

    /// Weights per neuron (FC fan-in, or `C * kh * kw` for CONV).
    pub fn row_len(&self) -> usize {
        self.weights.len().checked_div(self.neurons).unwrap_or(match self.kind {
            LayerKind::Fc => 0,
            LayerKind::Conv(g) => g.in_channels * g.kernel_h * g.kernel_w,
        })
    }

    pub fn row(&self, neuron: usize) -> &[i8] {
        let k = self.row_len();
        &self.weights[neuron * k..(neuron + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i8]> {
        let k = self.row_len().max(1);
        self.weights.chunks(k)
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self.kind {
            LayerKind::Fc => {
                if input.numel() != self.row_len() {
                    return Err(Error::shape(format!(
                        "FC layer expects {} inputs, got shape {input}",
                        self.row_len()
                    )));
                }
                Ok(Shape::new(vec![self.neurons]))
            }
            LayerKind::Conv(g) => {
                let [c, h, w] = input.dims() else {
                    return Err(Error::shape(format!("CONV layer needs a CxHxW input, got {input}")));
                };
                if *c != g.in_channels {
                    return Err(Error::shape(format!(
                        "CONV layer expects {} channels, got {c}",
                        g.in_channels
                    )));
                }
                if g.stride == 0 || g.kernel_h == 0 || g.kernel_w == 0 {
                    return Err(Error::shape("CONV stride and kernel must be positive"));
                }
                if h + 2 * g.padding < g.kernel_h || w + 2 * g.padding < g.kernel_w {
                    return Err(Error::shape(format!("kernel larger than padded input {input}")));
                }
                let ho = (h + 2 * g.padding - g.kernel_h) / g.stride + 1;
                let wo = (w + 2 * g.padding - g.kernel_w) / g.stride + 1;
                Ok(Shape::new(vec![self.neurons, ho, wo]))
            }
        }
    }

    /// Output positions per neuron for a given input shape (1 for FC).
    pub fn positions(&self, input: &Shape) -> Result<usize> {
        let out = self.output_shape(input)?;
        Ok(out.numel() / self.neurons.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.contains(&i8::MIN) {
            return Err(Error::InvalidParameter(
                "weight code -128 has no 7-bit magnitude; quantize to [-127, 127]".into(),
            ));
        }
        if let Some(bn) = &self.bn {
            if bn.len() != self.neurons {
                return Err(Error::shape(format!(
                    "{} batch-norm channels for {} neurons",
                    bn.len(),
                    self.neurons
                )));
            }
            for p in bn {
                p.validate()?;
            }
        }
        if self.out_shift > 30 {
            return Err(Error::InvalidParameter(format!("output shift {} too large", self.out_shift)));
        }
        Ok(())
    }
}

/// Ordered layer chain with cached per-layer shapes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantModel {
    input_shape: Shape,
    layers: Vec<LayerDesc>,
    shapes: Vec<(Shape, Shape)>,
}

impl QuantModel {
    pub fn new(input_shape: Shape, layers: Vec<LayerDesc>) -> Result<Self> {
        let mut shapes: Vec<(Shape, Shape)> = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let out = layer
                .output_shape(&current)
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            if let Some(tap) = layer.residual {
                let source = match tap {
                    ResidualTap::Input => &input_shape,
                    ResidualTap::Layer(j) if j < i => &shapes[j].1,
                    ResidualTap::Layer(j) => {
                        return Err(Error::shape(format!(
                            "layer {i}: residual source {j} does not precede it"
                        )))
                    }
                };
                if source != &out {
                    return Err(Error::shape(format!(
                        "layer {i}: residual source shape {source} differs from output {out}"
                    )));
                }
            }
            shapes.push((current, out.clone()));
            current = out;
        }
        Ok(QuantModel {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerDesc {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_input_shape(&self, i: usize) -> &Shape {
        &self.shapes[i].0
    }

    pub fn layer_output_shape(&self, i: usize) -> &Shape {
        &self.shapes[i].1
    }

    pub fn output_shape(&self) -> &Shape {
        self.shapes.last().map(|s| &s.1).unwrap_or(&self.input_shape)
    }

    pub fn positions(&self, i: usize) -> usize {
        self.shapes[i].1.numel() / self.layers[i].neurons.max(1)
    }

    /// MACs for one forward pass of layer `i`.
    pub fn layer_macs(&self, i: usize) -> u64 {
        (self.layers[i].neurons * self.positions(i) * self.layers[i].row_len()) as u64
    }

    pub fn total_macs(&self) -> u64 {
        (0..self.len()).map(|i| self.layer_macs(i)).sum()
    }
}
