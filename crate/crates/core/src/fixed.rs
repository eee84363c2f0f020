//! Fixed-point scalars used between the integer accumulator and the
//! requantized int8 activation.
//!
//! Pre-activation values are carried as [`Fixed`], a signed value with 16
//! fractional bits stored in an `i64`. Batch-norm parameters are Q16.16
//! (`i32` raw) and are folded into a per-channel affine map whose scale and
//! offset carry 32 fractional bits, so that applying the map to any
//! accumulator with `|acc| < 2^15` lands within one Q16.16 ULP of the exact
//! rational result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAC_BITS: u32 = 16;
const ONE_RAW: i64 = 1 << FRAC_BITS;
const AFFINE_FRAC_BITS: u32 = 32;

/// Signed fixed-point value with 16 fractional bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fixed(i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    pub const ONE: Fixed = Fixed(ONE_RAW);

    pub const fn from_raw(raw: i64) -> Self {
        Fixed(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub const fn from_int(v: i64) -> Self {
        Fixed(v << FRAC_BITS)
    }

    /// Nearest representable value, ties away from zero.
    pub fn from_f64(v: f64) -> Self {
        Fixed((v * ONE_RAW as f64).round() as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn saturating_add(self, other: Fixed) -> Fixed {
        Fixed(self.0.saturating_add(other.0))
    }

    /// Integer part after dividing by `2^shift`, rounded half away from zero.
    pub fn round_shift(self, shift: u32) -> i64 {
        div_round(self.0 as i128, 1i128 << (FRAC_BITS + shift)) as i64
    }
}

impl std::ops::Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0 + rhs.0)
    }
}

impl std::fmt::Display for Fixed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// `num / den` rounded half away from zero. `den` must be positive.
pub(crate) fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let half = den / 2;
    if num >= 0 {
        (num + half) / den
    } else {
        -((-num + half) / den)
    }
}

/// Per-channel batch-norm parameters, each a Q16.16 raw value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BnParams {
    pub mean: i32,
    pub std: i32,
    pub gamma: i32,
    pub beta: i32,
}

impl BnParams {
    pub fn from_f64(mean: f64, std: f64, gamma: f64, beta: f64) -> Self {
        let q = |v: f64| (v * ONE_RAW as f64).round() as i32;
        BnParams {
            mean: q(mean),
            std: q(std),
            gamma: q(gamma),
            beta: q(beta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std <= 0 {
            return Err(Error::InvalidParameter(format!(
                "batch-norm sigma must be positive, got raw {}",
                self.std
            )));
        }
        Ok(())
    }

    /// Folds `((x - mean) / std) * gamma + beta` into `x * scale + offset`.
    pub fn fold(&self) -> Result<BnAffine> {
        self.validate()?;
        let std = self.std as i128;
        let scale = div_round((self.gamma as i128) << AFFINE_FRAC_BITS, std);
        // beta - gamma * mean / std, with 32 fractional bits.
        let offset = div_round(
            (self.beta as i128 * std - self.gamma as i128 * self.mean as i128)
                << (AFFINE_FRAC_BITS - FRAC_BITS),
            std,
        );
        let scale = i64::try_from(scale)
            .map_err(|_| Error::InvalidParameter("batch-norm gamma/sigma out of range".into()))?;
        let offset = i64::try_from(offset)
            .map_err(|_| Error::InvalidParameter("batch-norm offset out of range".into()))?;
        Ok(BnAffine { scale, offset })
    }
}

/// Folded batch-norm: `x * scale + offset`, both with 32 fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnAffine {
    scale: i64,
    offset: i64,
}

impl BnAffine {
    pub fn apply(&self, x: Fixed) -> Fixed {
        let wide = x.raw() as i128 * self.scale as i128 + ((self.offset as i128) << FRAC_BITS);
        let raw = div_round(wide, 1i128 << AFFINE_FRAC_BITS);
        Fixed(raw.clamp(i64::MIN as i128, i64::MAX as i128) as i64)
    }

    pub fn apply_acc(&self, acc: i32) -> Fixed {
        self.apply(Fixed::from_int(acc as i64))
    }
}

pub fn apply_batchnorm(acc: i32, bn: &BnParams) -> Result<Fixed> {
    Ok(bn.fold()?.apply_acc(acc))
}

pub fn relu(x: Fixed) -> Fixed {
    if x.is_negative() {
        Fixed::ZERO
    } else {
        x
    }
}

/// Maps a pre-activation to an int8 code: optional ReLU, divide by
/// `2^shift`, round, saturate.
pub fn requantize(pre: Fixed, shift: u8, apply_relu: bool) -> i8 {
    let x = if apply_relu { relu(pre) } else { pre };
    x.round_shift(shift as u32).clamp(-128, 127) as i8
}

/// A residual int8 code expressed in the consumer's pre-activation units.
pub fn residual_to_fixed(code: i8, shift: u8) -> Fixed {
    Fixed::from_int((code as i64) << shift)
}
