//! Angle geometry of two weight vectors against a random input direction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle between two vectors in degrees, `[0, 180]`.
pub fn cosine_angle<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("angle undefined for a zero-norm vector".into()));
    }
    Ok(angle_from_cos(dot / (na * nb).sqrt()))
}

pub(crate) fn angle_from_cos(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Sign pair `(sign(C·A), sign(C·B))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    PosPos,
    NegNeg,
    PosNeg,
    NegPos,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::PosPos, Region::NegNeg, Region::PosNeg, Region::NegPos];

    pub fn of(ca: f64, cb: f64) -> Region {
        // sign(0) = +
        match (ca < 0.0, cb < 0.0) {
            (false, false) => Region::PosPos,
            (true, true) => Region::NegNeg,
            (false, true) => Region::PosNeg,
            (true, false) => Region::NegPos,
        }
    }

    pub fn mixed(self) -> bool {
        matches!(self, Region::PosNeg | Region::NegPos)
    }
}

fn check_angle(theta: f64) -> Result<()> {
    if !(0.0..=180.0).contains(&theta) {
        return Err(Error::Domain(format!("angle {theta} outside [0, 180]")));
    }
    Ok(())
}

/// Probability that a direction uniform on the sphere falls in `region`,
/// for two vectors `theta` degrees apart.
pub fn sign_region_probability(theta: f64, region: Region) -> Result<f64> {
    check_angle(theta)?;
    Ok(if region.mixed() {
        theta / 360.0
    } else {
        0.5 - theta / 360.0
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionFrequencies {
    pub pos_pos: f64,
    pub neg_neg: f64,
    pub pos_neg: f64,
    pub neg_pos: f64,
}

impl RegionFrequencies {
    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::PosPos => self.pos_pos,
            Region::NegNeg => self.neg_neg,
            Region::PosNeg => self.pos_neg,
            Region::NegPos => self.neg_pos,
        }
    }
}

const CHUNK: usize = 1 << 15;

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Empirical sign-region frequencies for two unit vectors `theta` degrees
/// apart in `dim` dimensions, against `n_samples` directions drawn uniformly
/// from the unit hypersphere. The vector pair itself is randomly oriented.
/// Deterministic for a given seed regardless of thread count.
pub fn monte_carlo_sign_probability(theta: f64, dim: usize, n_samples: usize, seed: u64) -> Result<RegionFrequencies> {
    check_angle(theta)?;
    if dim < 2 {
        return Err(Error::Domain(format!("dimension {dim} < 2")));
    }
    if n_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random orthonormal pair (u, v): A = u, B = cos θ u + sin θ v.
    let mut u = gaussian(&mut rng, dim);
    normalize(&mut u);
    let mut v = gaussian(&mut rng, dim);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, &ui)| *x -= proj * ui);
    normalize(&mut v);
    let (s, c) = theta.to_radians().sin_cos();
    let a = u;
    let b: Vec<f64> = if theta == 0.0 {
        a.clone()
    } else if theta == 180.0 {
        a.iter().map(|x| -x).collect()
    } else {
        a.iter().zip(&v).map(|(&ui, &vi)| c * ui + s * vi).collect()
    };

    let chunks = n_samples.div_ceil(CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 1);
            let len = CHUNK.min(n_samples - chunk * CHUNK);
            let mut counts = [0u64; 4];
            for _ in 0..len {
                // A Gaussian vector has a uniformly distributed direction;
                // the signs do not depend on its length.
                let (mut ca, mut cb) = (0.0f64, 0.0f64);
                for (&ai, &bi) in a.iter().zip(&b) {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    ca += g * ai;
                    cb += g * bi;
                }
                counts[Region::of(ca, cb) as usize] += 1;
            }
            counts
        })
        .reduce(|| [0u64; 4], |x, y| [x[0] + y[0], x[1] + y[1], x[2] + y[2], x[3] + y[3]]);
    let n = n_samples as f64;
    Ok(RegionFrequencies {
        pos_pos: counts[Region::PosPos as usize] as f64 / n,
        neg_neg: counts[Region::NegNeg as usize] as f64 / n,
        pos_neg: counts[Region::PosNeg as usize] as f64 / n,
        neg_pos: counts[Region::NegPos as usize] as f64 / n,
    })
}
