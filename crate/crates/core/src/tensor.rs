use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

/// Real value represented by one integer code: `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    pub num: i32,
    pub den: u32,
}

impl Scale {
    pub const UNIT: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: i32, den: u32) -> Result<Self> {
        if den == 0 || num <= 0 {
            return Err(Error::InvalidParameter(format!("scale {num}/{den} must be positive")));
        }
        Ok(Scale { num, den })
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Scale {
    fn default() -> Self {
        Scale::UNIT
    }
}

/// Symmetric int8 tensor, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Shape,
    data: Vec<i8>,
    scale: Scale,
}

impl QuantTensor {
    pub fn new(shape: Shape, data: Vec<i8>, scale: Scale) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "tensor data has {} elements, shape {} needs {}",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(QuantTensor { shape, data, scale })
    }

    pub fn from_codes(dims: &[usize], data: Vec<i8>) -> Result<Self> {
        Self::new(Shape::from(dims), data, Scale::UNIT)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        QuantTensor {
            shape,
            data: vec![0; n],
            scale: Scale::UNIT,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Symmetric per-tensor quantization of real values with `-128` excluded, so
/// every code has a 7-bit magnitude.
pub fn quantize_symmetric(values: &[f64], max_abs: f64) -> Vec<i8> {
    let step = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
    values
        .iter()
        .map(|v| (v / step).round().clamp(-127.0, 127.0) as i8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(QuantTensor::from_codes(&[2, 3], vec![0; 5]).is_err());
        assert!(QuantTensor::from_codes(&[2, 3], vec![0; 6]).is_ok());
    }

    #[test]
    fn symmetric_quantization_never_emits_minus_128() {
        let q = quantize_symmetric(&[-10.0, -1.0, 0.0, 1.0, 10.0, -20.0], 10.0);
        assert_eq!(q, vec![-127, -13, 0, 13, 127, -127]);
    }
}
