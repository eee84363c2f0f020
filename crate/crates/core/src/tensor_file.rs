//! Batches of int8 tensors on disk.
//!
//! ```text
//! "MRKT" | dtype u8 (1 = int8) | rank u8 (1..=4) | reserved u16 = 0
//! | dims u16 * 4 (unused trailing dims are 0) | data, row-major
//! ```
//!
//! The first dimension counts samples; the rest is the shape of one sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{QuantTensor, Scale, Shape};

pub const MAGIC: &[u8; 4] = b"MRKT";
pub const HEADER_LEN: usize = 16;
const DTYPE_I8: u8 = 1;

pub fn encode_batch(samples: &[QuantTensor]) -> Result<Vec<u8>> {
    let Some(first) = samples.first() else {
        return Err(Error::config("cannot write an empty batch"));
    };
    if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "batch mixes shapes {} and {}",
            first.shape(),
            bad.shape()
        )));
    }
    let mut dims = vec![samples.len()];
    dims.extend(first.shape().dims());
    if dims.len() > 4 {
        return Err(Error::shape(format!("batch rank {} exceeds 4", dims.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * first.len());
    out.extend(MAGIC);
    out.push(DTYPE_I8);
    out.push(dims.len() as u8);
    out.extend([0, 0]);
    for i in 0..4 {
        let d = dims.get(i).copied().unwrap_or(0);
        let d = u16::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds 65535")))?;
        out.extend(d.to_le_bytes());
    }
    for s in samples {
        out.extend(s.data().iter().map(|&x| x as u8));
    }
    Ok(out)
}

pub fn decode_batch(data: &[u8]) -> Result<Vec<QuantTensor>> {
    if data.len() < HEADER_LEN {
        return Err(Error::parse(data.len(), "truncated tensor header"));
    }
    if &data[..4] != MAGIC {
        return Err(Error::parse(0, "bad magic, expected MRKT"));
    }
    if data[4] != DTYPE_I8 {
        return Err(Error::parse(4, format!("unsupported dtype {}", data[4])));
    }
    let rank = data[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::parse(5, format!("rank {rank} outside 1..=4")));
    }
    if data[6] != 0 || data[7] != 0 {
        return Err(Error::parse(6, "reserved bytes must be zero"));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| u16::from_le_bytes([data[8 + 2 * i], data[9 + 2 * i]]) as usize)
        .collect();
    if dims[rank..].iter().any(|&d| d != 0) {
        return Err(Error::parse(8 + 2 * rank, "unused dimensions must be zero"));
    }
    let count = dims[0];
    let sample = Shape::new(dims[1..rank].to_vec());
    let per = sample.numel();
    let body = &data[HEADER_LEN..];
    if body.len() != count * per {
        return Err(Error::parse(
            HEADER_LEN + body.len().min(count * per),
            format!("expected {} data bytes, found {}", count * per, body.len()),
        ));
    }
    if rank == 1 {
        return Err(Error::parse(5, "rank 1 holds no sample dimensions"));
    }
    body.chunks(per.max(1))
        .take(count)
        .map(|c| QuantTensor::new(sample.clone(), c.iter().map(|&b| b as i8).collect(), Scale::UNIT))
        .collect()
}

pub fn write_batch(path: impl AsRef<Path>, samples: &[QuantTensor]) -> Result<()> {
    std::fs::write(path, encode_batch(samples)?)?;
    Ok(())
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<QuantTensor>> {
    decode_batch(&std::fs::read(path)?)
}
