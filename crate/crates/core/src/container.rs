//! Binary model container.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   "MORK" | version u16 = 1 | endian u8 = 1 | flags u8
//!          (bit 0 cluster plan, bit 1 predictor table)
//!          | layer_count u32 | input rank u32 | dims u32 * rank
//!          | threshold f64                          (flag bit 1)
//! layer    kind u8 (0 FC, 1 CONV) | flags u8 (bit 0 ReLU, bit 1 BN,
//!          bit 2 residual) | out_shift u8 | reserved u8 = 0
//!          | neurons u32 | row_len u32
//!          | in_channels, kernel_h, kernel_w, stride, padding u32 (CONV)
//!          | residual tap u32 (0 = model input, j + 1 = layer j)
//!          | scale num i32 | scale den u32
//!          | proxy_rows u32 | member_rows u32
//!          | proxy rows:  idx u32 | cluster_size u16 | packed row
//!          | member rows: packed row | idx u32
//!          | params: (c i32 Q1.30 | m i64 | b i64 | enabled u8) * neurons
//!          | BN: (mean, std, gamma, beta i32 Q16.16) * neurons
//! ```
//!
//! A packed row of K weights is exactly K bytes: the 7-bit magnitudes as
//! one LSB-first bit stream, followed by K sign bits (1 = negative) that
//! double as the binary weights. Proxy rows hold proxies in cluster order
//! followed by singletons; member rows follow in the same cluster order.
//! Without a cluster plan every neuron is a singleton proxy row.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::calibration::{PredictorParams, PredictorTable};
use crate::cluster::{Cluster, LayerClusters, ModelClusters};
use crate::error::{Error, Result};
use crate::fixed::{BnParams, Fixed};
use crate::model::{ConvGeometry, LayerDesc, LayerKind, QuantModel, ResidualTap};
use crate::tensor::{Scale, Shape};

pub const MAGIC: &[u8; 4] = b"MORK";
pub const VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
const FLAG_CLUSTERS: u8 = 1;
const FLAG_PARAMS: u8 = 2;
const LAYER_RELU: u8 = 1;
const LAYER_BN: u8 = 2;
const LAYER_RESIDUAL: u8 = 4;

/// Packs `w` into `w.len()` bytes. `-128` has no 7-bit magnitude and must be
/// rejected earlier.
pub fn pack_row(w: &[i8]) -> Vec<u8> {
    let k = w.len();
    let mut out = vec![0u8; k];
    let mut bit = 0usize;
    let mut put = |out: &mut [u8], v: u8, bits: usize| {
        for i in 0..bits {
            if v >> i & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    };
    for &x in w {
        debug_assert!(x != i8::MIN);
        put(&mut out, x.unsigned_abs() & 0x7f, 7);
    }
    for &x in w {
        put(&mut out, (x < 0) as u8, 1);
    }
    out
}

pub fn unpack_row(bytes: &[u8]) -> Vec<i8> {
    let k = bytes.len();
    let get = |bit: usize| bytes[bit / 8] >> (bit % 8) & 1;
    (0..k)
        .map(|i| {
            let mag = (0..7).fold(0u8, |acc, b| acc | get(i * 7 + b) << b) as i8;
            if get(7 * k + i) == 1 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// Sign bitmap of a packed row (the binary weights), `ceil(K / 8)` bytes.
pub fn sign_bitmap(packed: &[u8]) -> Vec<u8> {
    let k = packed.len();
    let mut out = vec![0u8; k.div_ceil(8)];
    for i in 0..k {
        let bit = 7 * k + i;
        if packed[bit / 8] >> (bit % 8) & 1 == 1 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub model: QuantModel,
    pub clusters: Option<ModelClusters>,
    pub params: Option<PredictorTable>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend(v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn len(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in 32 bits")))?;
        self.u32(v);
        Ok(())
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("truncated {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr(what)?))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr(what)?))
    }
    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.arr(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr(what)?))
    }
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::parse(self.pos, reason)
    }
}

impl ModelContainer {
    pub fn new(model: QuantModel, clusters: Option<ModelClusters>, params: Option<PredictorTable>) -> Result<Self> {
        if let Some(c) = &clusters {
            c.validate_for(&model)?;
        }
        if let Some(p) = &params {
            p.validate_for(&model)?;
        }
        Ok(ModelContainer { model, clusters, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u16(VERSION);
        w.u8(LITTLE_ENDIAN);
        w.u8(
            if self.clusters.is_some() { FLAG_CLUSTERS } else { 0 }
                | if self.params.is_some() { FLAG_PARAMS } else { 0 },
        );
        w.len(m.len(), "layer count")?;
        w.len(m.input_shape().rank(), "input rank")?;
        for &d in m.input_shape().dims() {
            w.len(d, "input dimension")?;
        }
        if let Some(p) = &self.params {
            w.f64(p.threshold);
        }
        for (i, layer) in m.layers().iter().enumerate() {
            let plan = match &self.clusters {
                Some(c) => c.layers[i].clone(),
                None => LayerClusters::all_singletons(layer.neurons),
            };
            write_layer(&mut w, layer, &plan, self.params.as_ref().map(|p| p.layers[i].as_slice()))?;
        }
        Ok(w.0)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::parse(0, "bad magic, expected MORK"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        if r.u8("endianness tag")? != LITTLE_ENDIAN {
            return Err(Error::parse(6, "unsupported endianness tag"));
        }
        let flags = r.u8("flags")?;
        if flags & !(FLAG_CLUSTERS | FLAG_PARAMS) != 0 {
            return Err(Error::parse(7, format!("unknown flags {flags:#04x}")));
        }
        let n_layers = r.usize("layer count")?;
        let rank = r.usize("input rank")?;
        if rank == 0 || rank > 8 {
            return Err(r.err(format!("input rank {rank} out of range")));
        }
        let dims = (0..rank).map(|_| r.usize("input dimension")).collect::<Result<Vec<_>>>()?;
        if dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d).filter(|&x| x <= u32::MAX as usize)).is_none() {
            return Err(r.err("input shape too large"));
        }
        let threshold = if flags & FLAG_PARAMS != 0 { Some(r.f64("threshold")?) } else { None };
        let mut layers = Vec::new();
        let mut plans = Vec::new();
        let mut params = Vec::new();
        for _ in 0..n_layers {
            let (layer, plan, p) = read_layer(&mut r, flags & FLAG_PARAMS != 0)?;
            layers.push(layer);
            plans.push(plan);
            params.push(p);
        }
        if r.pos != data.len() {
            return Err(r.err(format!("{} trailing bytes", data.len() - r.pos)));
        }
        let model = QuantModel::new(Shape::new(dims), layers).map_err(|e| Error::parse(data.len(), e.to_string()))?;
        let clusters = (flags & FLAG_CLUSTERS != 0).then_some(ModelClusters { layers: plans });
        let params = threshold.map(|threshold| PredictorTable {
            threshold,
            layers: params.into_iter().map(Option::unwrap_or_default).collect(),
        });
        ModelContainer::new(model, clusters, params).map_err(|e| Error::parse(data.len(), e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the model alone (no cluster plan, no predictor table), so
    /// runs of the same network compare equal whatever was attached.
    pub fn model_hash(&self) -> Result<String> {
        let bare = ModelContainer {
            model: self.model.clone(),
            clusters: None,
            params: None,
        };
        Ok(hex::encode(Sha256::digest(bare.to_bytes()?)))
    }
}

fn write_layer(w: &mut Writer, layer: &LayerDesc, plan: &LayerClusters, params: Option<&[PredictorParams]>) -> Result<()> {
    w.u8(match layer.kind {
        LayerKind::Fc => 0,
        LayerKind::Conv(_) => 1,
    });
    w.u8(
        if layer.relu { LAYER_RELU } else { 0 }
            | if layer.bn.is_some() { LAYER_BN } else { 0 }
            | if layer.residual.is_some() { LAYER_RESIDUAL } else { 0 },
    );
    w.u8(layer.out_shift);
    w.u8(0);
    w.len(layer.neurons, "neuron count")?;
    w.len(layer.row_len(), "row length")?;
    if let LayerKind::Conv(g) = layer.kind {
        for v in [g.in_channels, g.kernel_h, g.kernel_w, g.stride, g.padding] {
            w.len(v, "conv geometry")?;
        }
    }
    if let Some(tap) = layer.residual {
        w.len(
            match tap {
                ResidualTap::Input => 0,
                ResidualTap::Layer(j) => j + 1,
            },
            "residual tap",
        )?;
    }
    w.i32(layer.weight_scale.num);
    w.u32(layer.weight_scale.den);
    w.len(plan.clusters.len() + plan.singletons.len(), "proxy rows")?;
    w.len(plan.member_count(), "member rows")?;
    for c in &plan.clusters {
        w.len(c.proxy, "index")?;
        let size = u16::try_from(c.size()).map_err(|_| Error::config(format!("cluster of {} members", c.size())))?;
        w.u16(size);
        w.0.extend(pack_row(layer.row(c.proxy)));
    }
    for &s in &plan.singletons {
        w.len(s, "index")?;
        w.u16(0);
        w.0.extend(pack_row(layer.row(s)));
    }
    for c in &plan.clusters {
        for &m in &c.members {
            w.0.extend(pack_row(layer.row(m)));
            w.len(m, "index")?;
        }
    }
    if let Some(ps) = params {
        for p in ps {
            w.i32(p.c_raw());
            w.i64(p.m().raw());
            w.i64(p.b().raw());
            w.u8(p.enabled() as u8);
        }
    }
    if let Some(bn) = &layer.bn {
        for p in bn {
            for v in [p.mean, p.std, p.gamma, p.beta] {
                w.i32(v);
            }
        }
    }
    Ok(())
}

type LayerParts = (LayerDesc, LayerClusters, Option<Vec<PredictorParams>>);

fn read_layer(r: &mut Reader<'_>, has_params: bool) -> Result<LayerParts> {
    let start = r.pos;
    let kind = r.u8("layer kind")?;
    let flags = r.u8("layer flags")?;
    if flags & !(LAYER_RELU | LAYER_BN | LAYER_RESIDUAL) != 0 {
        return Err(Error::parse(start + 1, format!("unknown layer flags {flags:#04x}")));
    }
    let out_shift = r.u8("output shift")?;
    if r.u8("reserved byte")? != 0 {
        return Err(Error::parse(start + 3, "reserved byte must be zero"));
    }
    let neurons = r.usize("neuron count")?;
    let k = r.usize("row length")?;
    let geometry = match kind {
        0 => None,
        1 => {
            let mut v = [0usize; 5];
            for x in &mut v {
                *x = r.usize("conv geometry")?;
            }
            if v[0].checked_mul(v[1]).and_then(|x| x.checked_mul(v[2])) != Some(k) {
                return Err(r.err("conv geometry does not match row length"));
            }
            Some(ConvGeometry {
                in_channels: v[0],
                kernel_h: v[1],
                kernel_w: v[2],
                stride: v[3],
                padding: v[4],
            })
        }
        other => return Err(Error::parse(start, format!("unknown layer kind {other}"))),
    };
    let residual = if flags & LAYER_RESIDUAL != 0 {
        Some(match r.usize("residual tap")? {
            0 => ResidualTap::Input,
            j => ResidualTap::Layer(j - 1),
        })
    } else {
        None
    };
    let weight_scale = Scale {
        num: r.i32("scale")?,
        den: r.u32("scale")?,
    };
    let proxy_rows = r.usize("proxy row count")?;
    let member_rows = r.usize("member row count")?;
    if proxy_rows.checked_add(member_rows) != Some(neurons) {
        return Err(r.err(format!("{proxy_rows} proxy rows + {member_rows} member rows != {neurons} neurons")));
    }
    // Guard the allocation below against absurd counts in corrupt files.
    if neurons > r.data.len() || neurons.saturating_mul(k) > r.data.len() {
        return Err(r.err("weight table larger than the file"));
    }
    let mut weights = vec![0i8; neurons * k];
    let mut seen = vec![false; neurons];
    let mut place = |r: &Reader<'_>, idx: usize, row: Vec<i8>| -> Result<()> {
        if idx >= neurons || seen[idx] {
            return Err(r.err(format!("neuron index {idx} out of range or repeated")));
        }
        seen[idx] = true;
        weights[idx * k..(idx + 1) * k].copy_from_slice(&row);
        Ok(())
    };
    let mut proxies: Vec<(usize, usize)> = Vec::with_capacity(proxy_rows);
    for _ in 0..proxy_rows {
        let idx = r.usize("proxy index")?;
        let size = r.u16("cluster size")? as usize;
        let row = unpack_row(r.take(k, "proxy row")?);
        place(r, idx, row)?;
        proxies.push((idx, size));
    }
    let mut members = Vec::with_capacity(member_rows);
    for _ in 0..member_rows {
        let row = unpack_row(r.take(k, "member row")?);
        let idx = r.usize("member index")?;
        place(r, idx, row)?;
        members.push(idx);
    }
    let mut plan = LayerClusters {
        neurons,
        ..Default::default()
    };
    let mut next = members.into_iter();
    for (idx, size) in proxies {
        if size == 0 {
            plan.singletons.push(idx);
        } else {
            let ms: Vec<usize> = next.by_ref().take(size).collect();
            if ms.len() != size {
                return Err(r.err("cluster sizes exceed the member table"));
            }
            plan.clusters.push(Cluster { proxy: idx, members: ms });
        }
    }
    if next.next().is_some() {
        return Err(r.err("member rows not claimed by any proxy"));
    }
    let params = if has_params {
        let mut ps = Vec::with_capacity(neurons);
        for _ in 0..neurons {
            let c = r.i32("parameter c")?;
            let m = Fixed::from_raw(r.i64("parameter m")?);
            let b = Fixed::from_raw(r.i64("parameter b")?);
            let enabled = match r.u8("enabled flag")? {
                0 => false,
                1 => true,
                v => return Err(r.err(format!("enabled flag {v}"))),
            };
            ps.push(PredictorParams::from_raw(c, m, b, enabled));
        }
        Some(ps)
    } else {
        None
    };
    let bn = if flags & LAYER_BN != 0 {
        let mut bn = Vec::with_capacity(neurons);
        for _ in 0..neurons {
            bn.push(BnParams {
                mean: r.i32("batch norm")?,
                std: r.i32("batch norm")?,
                gamma: r.i32("batch norm")?,
                beta: r.i32("batch norm")?,
            });
        }
        Some(bn)
    } else {
        None
    };
    let layer = LayerDesc {
        kind: geometry.map_or(LayerKind::Fc, LayerKind::Conv),
        neurons,
        weights,
        weight_scale,
        bn,
        residual,
        relu: flags & LAYER_RELU != 0,
        out_shift,
    };
    if layer.kind == LayerKind::Fc && neurons == 0 && k != 0 {
        return Err(Error::parse(start, "empty FC layer with nonzero row length"));
    }
    Ok((layer, plan, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_model, RandomModelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minus_five_member_row_fixture() {
        let row = [-5i8, 0, 0, 0, 0, 0, 0, 0];
        let packed = pack_row(&row);
        assert_eq!(packed, [0x05, 0, 0, 0, 0, 0, 0, 0x01]);
        assert_eq!(sign_bitmap(&packed), [0x01]);
        assert_eq!(unpack_row(&packed), row);
    }

    #[test]
    fn member_row_bytes_in_a_container() {
        // Neuron 1 (weights -5, 0, ...) is a member of proxy 0.
        let mut w = vec![0i8; 16];
        w[0] = -7;
        w[8] = -5;
        let model = QuantModel::new(Shape::new(vec![8]), vec![LayerDesc::fc(2, 8, w).unwrap().with_relu(true)]).unwrap();
        let plan = ModelClusters {
            layers: vec![LayerClusters {
                neurons: 2,
                clusters: vec![Cluster { proxy: 0, members: vec![1] }],
                singletons: vec![],
            }],
        };
        let bytes = ModelContainer::new(model, Some(plan), None).unwrap().to_bytes().unwrap();
        let tail = &bytes[bytes.len() - 12..];
        assert_eq!(tail, [0x05, 0, 0, 0, 0, 0, 0, 0x01, 1, 0, 0, 0]);
        let back = ModelContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.layer(0).row(1)[0], -5);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let model = QuantModel::new(Shape::new(vec![2]), vec![LayerDesc::fc(1, 2, vec![1, -1]).unwrap()]).unwrap();
        let good = ModelContainer::new(model, None, None).unwrap().to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(ModelContainer::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(ModelContainer::from_bytes(&bad), Err(Error::Parse { offset: 4, .. })));
        for cut in 0..good.len() {
            match ModelContainer::from_bytes(&good[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut long = good.clone();
        long.push(0);
        assert!(ModelContainer::from_bytes(&long).is_err());
    }

    fn random_container(seed: u64) -> ModelContainer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = RandomModelSpec {
            max_neurons: 48,
            ..Default::default()
        };
        let model = random_model(&mut rng, &spec);
        let clusters = rng.random_bool(0.7).then(|| ModelClusters::build(&model, None));
        let params = rng.random_bool(0.7).then(|| PredictorTable {
            threshold: rng.random_range(0.0..=1.0),
            layers: model
                .layers()
                .iter()
                .map(|l| {
                    (0..l.neurons)
                        .map(|_| {
                            PredictorParams::from_raw(
                                rng.random_range(-(1 << 30)..=1 << 30),
                                Fixed::from_raw(rng.random()),
                                Fixed::from_raw(rng.random()),
                                rng.random(),
                            )
                        })
                        .collect()
                })
                .collect(),
        });
        ModelContainer::new(model, clusters, params).unwrap()
    }

    #[test]
    fn hash_ignores_attachments() {
        let c = random_container(3);
        let bare = ModelContainer::new(c.model.clone(), None, None).unwrap();
        assert_eq!(c.model_hash().unwrap(), bare.model_hash().unwrap());
        assert_eq!(c.model_hash().unwrap().len(), 64);
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(seed in any::<u64>()) {
            let c = random_container(seed);
            let bytes = c.to_bytes().unwrap();
            let back = ModelContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn packed_rows_round_trip_at_baseline_size(row in proptest::collection::vec(-127i8..=127, 0..300)) {
            let packed = pack_row(&row);
            prop_assert_eq!(packed.len(), row.len());
            prop_assert_eq!(unpack_row(&packed), row.clone());
            let signs: Vec<bool> = row.iter().map(|&x| x < 0).collect();
            let bitmap = sign_bitmap(&packed);
            for (i, s) in signs.iter().enumerate() {
                prop_assert_eq!(bitmap[i / 8] >> (i % 8) & 1 == 1, *s);
            }
        }

        #[test]
        fn corrupt_bytes_never_panic(seed in any::<u64>(), pos in any::<prop::sample::Index>(), val in any::<u8>()) {
            let mut bytes = random_container(seed).to_bytes().unwrap();
            let i = pos.index(bytes.len());
            bytes[i] = val;
            let _ = ModelContainer::from_bytes(&bytes);
        }
    }
}
