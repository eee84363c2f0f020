//! Event-driven timing of one layer on the CU and binCU arrays.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::{AccelConfig, DramConfig};
use crate::error::{Error, Result};
use crate::model::{LayerDesc, LayerKind};
use crate::tensor::Shape;

/// Predictor bytes staged per binary evaluation besides the sign bitmap
/// (`m` and `b`).
pub const PARAM_STAGING_BYTES: u64 = 8;

/// In-order pipe with burst rounding, a fixed latency and an optional byte
/// rate.
#[derive(Clone, Debug)]
pub(crate) struct DramPipe {
    cfg: DramConfig,
    free_at: u64,
}

impl DramPipe {
    pub fn new(cfg: DramConfig) -> Self {
        DramPipe { cfg, free_at: 0 }
    }

    /// Time the last byte of a request issued at `t` is available.
    pub fn request(&mut self, t: u64, bytes: u64) -> u64 {
        if bytes == 0 {
            return t;
        }
        let burst = self.cfg.burst_bytes as u64;
        let bus = bytes.div_ceil(burst) * burst;
        let xfer = match self.cfg.bandwidth_bytes_per_cycle {
            Some(bw) => (bus as f64 / bw).ceil() as u64,
            None => 0,
        };
        let start = t.max(self.free_at);
        self.free_at = start + xfer;
        self.free_at + self.cfg.latency_cycles
    }
}

/// A contiguous range of output positions processed with one input load.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowBlock {
    pub positions: Range<usize>,
    pub input_bytes: u64,
}

/// Splits a layer's output into blocks whose input windows fit the input
/// SRAM: whole output rows when possible, otherwise column runs.
pub fn row_blocks(layer: &LayerDesc, input_shape: &Shape, cfg: &AccelConfig) -> Result<Vec<RowBlock>> {
    let cap = cfg.input_sram_bytes;
    match layer.kind {
        LayerKind::Fc => {
            let k = input_shape.numel();
            if k > cap {
                return Err(Error::config(format!(
                    "FC input of {k} bytes exceeds the {cap}-byte input SRAM"
                )));
            }
            Ok(vec![RowBlock {
                positions: 0..1,
                input_bytes: k as u64,
            }])
        }
        LayerKind::Conv(g) => {
            let out = layer.output_shape(input_shape)?;
            let (c, h, w) = (input_shape.dims()[0], input_shape.dims()[1], input_shape.dims()[2]);
            let (ho, wo) = (out.dims()[1], out.dims()[2]);
            // Input rows touched by output rows [r0, r1).
            let rows_in = |r0: usize, r1: usize| -> usize {
                let lo = (r0 * g.stride) as isize - g.padding as isize;
                let hi = ((r1 - 1) * g.stride + g.kernel_h) as isize - g.padding as isize;
                (hi.min(h as isize) - lo.max(0)).max(0) as usize
            };
            let cols_in = |c0: usize, c1: usize| -> usize {
                let lo = (c0 * g.stride) as isize - g.padding as isize;
                let hi = ((c1 - 1) * g.stride + g.kernel_w) as isize - g.padding as isize;
                (hi.min(w as isize) - lo.max(0)).max(0) as usize
            };
            let mut blocks = Vec::new();
            let mut r = 0;
            while r < ho {
                let mut r1 = r + 1;
                if c * rows_in(r, r1) * w > cap {
                    // One output row is too wide; fall back to column runs.
                    let mut col = 0;
                    while col < wo {
                        let mut c1 = col + 1;
                        let bytes = |c1: usize| c * rows_in(r, r + 1) * cols_in(col, c1);
                        if bytes(c1) > cap {
                            return Err(Error::config(format!(
                                "one CONV input window ({} bytes) exceeds the {cap}-byte input SRAM",
                                bytes(c1)
                            )));
                        }
                        while c1 < wo && bytes(c1 + 1) <= cap {
                            c1 += 1;
                        }
                        blocks.push(RowBlock {
                            positions: r * wo + col..r * wo + c1,
                            input_bytes: bytes(c1) as u64,
                        });
                        col = c1;
                    }
                    r += 1;
                    continue;
                }
                while r1 < ho && c * rows_in(r, r1 + 1) * w <= cap {
                    r1 += 1;
                }
                blocks.push(RowBlock {
                    positions: r * wo..r1 * wo,
                    input_bytes: (c * rows_in(r, r1) * w) as u64,
                });
                r = r1;
            }
            Ok(blocks)
        }
    }
}

/// How a neuron enters the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    /// Queued at block start behind earlier neurons.
    Free,
    /// Unlocked when the given proxy completes.
    Proxy(usize),
}

/// Work of one neuron over the whole layer. Masks are per output position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronWork {
    pub neuron: usize,
    pub gate: Gate,
    pub skipped: Vec<bool>,
    pub binary: Vec<bool>,
}

/// A layer ready for scheduling. `work` is in storage order.
#[derive(Clone, Debug)]
pub struct LayerWork {
    pub row_len: usize,
    pub positions: usize,
    pub blocks: Vec<RowBlock>,
    pub work: Vec<NeuronWork>,
}

impl LayerWork {
    /// Every neuron evaluated at every position, in `order`.
    pub fn dense(layer: &LayerDesc, input_shape: &Shape, order: &[usize], cfg: &AccelConfig) -> Result<Self> {
        let positions = layer.positions(input_shape)?;
        Ok(LayerWork {
            row_len: layer.row_len(),
            positions,
            blocks: row_blocks(layer, input_shape, cfg)?,
            work: order
                .iter()
                .map(|&n| NeuronWork {
                    neuron: n,
                    gate: Gate::Free,
                    skipped: vec![false; positions],
                    binary: vec![false; positions],
                })
                .collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    Cu(usize),
    BinCu(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub unit: Unit,
    pub neuron: usize,
    pub block: usize,
    pub start: u64,
    pub end: u64,
    /// MACs on a CU, 1-bit operations on a binCU.
    pub ops: u64,
}

/// Event counts of one layer; energy is derived from these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerCounts {
    pub cycles: u64,
    pub macs_executed: u64,
    pub macs_skipped: u64,
    pub binary_ops: u64,
    pub binary_dots: u64,
    pub elements_evaluated: u64,
    pub elements_skipped: u64,
    pub dram_input_bytes: u64,
    pub dram_weight_bytes: u64,
    pub dram_predictor_bytes: u64,
    pub dram_write_bytes: u64,
    pub input_sram_read_bytes: u64,
    pub binweight_sram_read_bytes: u64,
    pub cu_buffer_read_bytes: u64,
    pub cu_buffer_write_bytes: u64,
}

impl LayerCounts {
    pub fn merge(&mut self, o: &LayerCounts) {
        self.cycles += o.cycles;
        self.macs_executed += o.macs_executed;
        self.macs_skipped += o.macs_skipped;
        self.binary_ops += o.binary_ops;
        self.binary_dots += o.binary_dots;
        self.elements_evaluated += o.elements_evaluated;
        self.elements_skipped += o.elements_skipped;
        self.dram_input_bytes += o.dram_input_bytes;
        self.dram_weight_bytes += o.dram_weight_bytes;
        self.dram_predictor_bytes += o.dram_predictor_bytes;
        self.dram_write_bytes += o.dram_write_bytes;
        self.input_sram_read_bytes += o.input_sram_read_bytes;
        self.binweight_sram_read_bytes += o.binweight_sram_read_bytes;
        self.cu_buffer_read_bytes += o.cu_buffer_read_bytes;
        self.cu_buffer_write_bytes += o.cu_buffer_write_bytes;
    }

    pub fn dram_read_bytes(&self) -> u64 {
        self.dram_input_bytes + self.dram_weight_bytes + self.dram_predictor_bytes
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub counts: LayerCounts,
    pub events: Vec<TraceEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    CuDone(usize),
    BinDone(usize),
}

/// Schedules one layer: blocks run in sequence; inside a block free neurons
/// wait in a low-priority queue in storage order, and neurons released by
/// a proxy or by the binary path go through the bounded member FIFO, which
/// CUs drain first.
pub fn schedule_layer(lw: &LayerWork, cfg: &AccelConfig) -> Result<LayerTrace> {
    cfg.validate()?;
    let k = lw.row_len as u64;
    let mut trace = LayerTrace::default();
    if lw.work.is_empty() || lw.positions == 0 {
        return Ok(trace);
    }
    if lw.row_len > cfg.cu_buffer_bytes {
        return Err(Error::config(format!(
            "weight row of {} bytes exceeds the {}-byte CU buffer",
            lw.row_len, cfg.cu_buffer_bytes
        )));
    }
    let staging = k.div_ceil(8) + PARAM_STAGING_BYTES;
    let any_binary = lw.work.iter().any(|w| w.binary.iter().any(|&b| b));
    if any_binary && staging > cfg.binweight_sram_bytes as u64 {
        return Err(Error::config(format!(
            "binary staging of {staging} bytes exceeds the {}-byte binweight SRAM",
            cfg.binweight_sram_bytes
        )));
    }
    let n_max = lw.work.iter().map(|w| w.neuron).max().unwrap_or(0) + 1;
    let mut slot = vec![usize::MAX; n_max];
    for (i, w) in lw.work.iter().enumerate() {
        slot[w.neuron] = i;
    }
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); lw.work.len()];
    for (i, w) in lw.work.iter().enumerate() {
        if let Gate::Proxy(p) = w.gate {
            let ps = *slot.get(p).filter(|&&s| s != usize::MAX).ok_or_else(|| {
                Error::config(format!("neuron {} gated on unknown proxy {p}", w.neuron))
            })?;
            if lw.work[ps].gate != Gate::Free {
                return Err(Error::config(format!("proxy {p} is itself gated")));
            }
            dependents[ps].push(i);
        }
    }

    let cu_cost = k.div_ceil(cfg.cu_width as u64);
    let bin_cost = k.div_ceil(cfg.bincu_width as u64);
    let mut pipe = DramPipe::new(cfg.dram);
    let c = &mut trace.counts;
    let mut now = 0u64;
    let mut writes_done = 0u64;

    for (bi, block) in lw.blocks.iter().enumerate() {
        let len = block.positions.len() as u64;
        let eval: Vec<u64> = lw
            .work
            .iter()
            .map(|w| w.skipped[block.positions.clone()].iter().filter(|&&s| !s).count() as u64)
            .collect();
        let bin: Vec<u64> = lw
            .work
            .iter()
            .map(|w| w.binary[block.positions.clone()].iter().filter(|&&b| b).count() as u64)
            .collect();
        c.dram_input_bytes += block.input_bytes;
        let t_in = pipe.request(now, block.input_bytes);

        let mut cu_free = vec![now; cfg.num_cus];
        let mut bin_free = vec![now; cfg.num_bincus];
        let mut low: VecDeque<usize> = VecDeque::new();
        let mut high: VecDeque<usize> = VecDeque::new();
        let mut bin_q: VecDeque<(usize, u64)> = VecDeque::new();
        let mut stalled: VecDeque<usize> = VecDeque::new();
        let mut fifo_used = 0usize;
        let mut heap: BinaryHeap<Reverse<(u64, Event)>> = BinaryHeap::new();
        let mut t = now;
        let mut end = t_in.max(now);

        for (i, w) in lw.work.iter().enumerate() {
            if w.gate == Gate::Free {
                if bin[i] > 0 {
                    stalled.push_back(i);
                } else if eval[i] > 0 {
                    low.push_back(i);
                } else {
                    stalled.extend(&dependents[i]);
                }
            }
        }

        loop {
            while let Some(&Reverse((te, ev))) = heap.peek() {
                if te > t {
                    break;
                }
                heap.pop();
                match ev {
                    Event::CuDone(i) => stalled.extend(&dependents[i]),
                    Event::BinDone(i) => {
                        if eval[i] > 0 {
                            high.push_back(i);
                        } else {
                            fifo_used -= 1;
                            stalled.extend(&dependents[i]);
                        }
                    }
                }
            }
            // Admit released neurons while the member FIFO has room.
            while fifo_used < cfg.member_fifo {
                let Some(i) = stalled.pop_front() else { break };
                if bin[i] > 0 {
                    fifo_used += 1;
                    c.dram_predictor_bytes += staging;
                    let staged = pipe.request(t, staging);
                    bin_q.push_back((i, staged));
                } else if eval[i] > 0 {
                    fifo_used += 1;
                    high.push_back(i);
                }
            }
            for (cu, free) in cu_free.iter_mut().enumerate() {
                if *free > t {
                    continue;
                }
                let i = if let Some(i) = high.pop_front() {
                    fifo_used -= 1;
                    i
                } else if let Some(i) = low.pop_front() {
                    i
                } else {
                    break;
                };
                c.dram_weight_bytes += k;
                let arrival = pipe.request(t, k);
                let start = t.max(arrival).max(t_in);
                let fin = start + eval[i] * cu_cost;
                let ops = eval[i] * k;
                trace.events.push(TraceEvent {
                    unit: Unit::Cu(cu),
                    neuron: lw.work[i].neuron,
                    block: bi,
                    start,
                    end: fin,
                    ops,
                });
                *free = fin;
                end = end.max(fin);
                heap.push(Reverse((fin, Event::CuDone(i))));
            }
            for (b, free) in bin_free.iter_mut().enumerate() {
                if *free > t {
                    continue;
                }
                let Some((i, staged)) = bin_q.pop_front() else { break };
                let start = t.max(staged).max(t_in);
                let fin = start + bin[i] * bin_cost;
                trace.events.push(TraceEvent {
                    unit: Unit::BinCu(b),
                    neuron: lw.work[i].neuron,
                    block: bi,
                    start,
                    end: fin,
                    ops: bin[i] * k,
                });
                *free = fin;
                end = end.max(fin);
                heap.push(Reverse((fin, Event::BinDone(i))));
            }
            match heap.peek() {
                Some(&Reverse((te, _))) => t = te,
                None => {
                    if !(low.is_empty() && high.is_empty() && bin_q.is_empty() && stalled.is_empty()) {
                        return Err(Error::Contract("scheduler stalled with pending work".into()));
                    }
                    break;
                }
            }
        }

        for (i, w) in lw.work.iter().enumerate() {
            let evaluated = eval[i];
            c.elements_evaluated += evaluated;
            c.elements_skipped += len - evaluated;
            c.macs_executed += evaluated * k;
            c.macs_skipped += (len - evaluated) * k;
            c.binary_dots += bin[i];
            c.binary_ops += bin[i] * k;
            debug_assert!(w.skipped.len() == lw.positions);
        }
        // Outputs of the block, zeros for skipped elements included.
        let out_bytes = len * lw.work.len() as u64;
        c.dram_write_bytes += out_bytes;
        writes_done = writes_done.max(pipe.request(end, out_bytes));
        now = end;
    }
    c.cycles = now.max(writes_done);
    // CUs stream the input window once per evaluated element; binCUs read
    // sign bits from both SRAMs.
    c.input_sram_read_bytes = c.macs_executed + c.binary_ops.div_ceil(8);
    c.binweight_sram_read_bytes = c.binary_ops.div_ceil(8);
    c.cu_buffer_write_bytes = c.dram_weight_bytes;
    c.cu_buffer_read_bytes = c.macs_executed;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvGeometry;
    use proptest::prelude::*;

    fn fc(n: usize, k: usize) -> LayerDesc {
        LayerDesc::fc(n, k, vec![1; n * k]).unwrap()
    }

    fn unconstrained() -> AccelConfig {
        AccelConfig {
            dram: DramConfig::unconstrained(),
            ..Default::default()
        }
    }

    fn dense_fc(n: usize, k: usize, cfg: &AccelConfig) -> LayerWork {
        let order: Vec<usize> = (0..n).collect();
        LayerWork::dense(&fc(n, k), &Shape::new(vec![k]), &order, cfg).unwrap()
    }

    /// 8 clusters of 8: proxies 0, 8, 16, ...; members gated on them.
    fn clustered_fc(skip_clusters: usize, cfg: &AccelConfig) -> LayerWork {
        let mut lw = dense_fc(64, 64, cfg);
        let mut order: Vec<usize> = (0..8).map(|c| c * 8).collect();
        order.extend((0..64).filter(|n| n % 8 != 0));
        lw.work = order
            .iter()
            .map(|&n| {
                let proxy = n - n % 8;
                let zero_cluster = proxy / 8 < skip_clusters;
                NeuronWork {
                    neuron: n,
                    gate: if n % 8 == 0 { Gate::Free } else { Gate::Proxy(proxy) },
                    skipped: vec![n % 8 != 0 && zero_cluster],
                    binary: vec![n % 8 != 0 && zero_cluster],
                }
            })
            .collect();
        lw
    }

    #[test]
    fn dram_pipe_quantizes_bursts_and_queues() {
        let mut p = DramPipe::new(DramConfig::default());
        // 1 byte -> one 64-byte burst at 8 B/cycle, plus 64 latency.
        assert_eq!(p.request(0, 1), 8 + 64);
        assert_eq!(p.request(0, 64), 16 + 64);
        assert_eq!(p.request(100, 0), 100);
        let mut u = DramPipe::new(DramConfig::unconstrained());
        assert_eq!(u.request(5, 1 << 20), 5);
    }

    #[test]
    fn fc_64x64_is_compute_bound_at_64_cycles() {
        let cfg = unconstrained();
        let t = schedule_layer(&dense_fc(64, 64, &cfg), &cfg).unwrap();
        assert_eq!(t.counts.cycles, 64);
        assert_eq!(t.counts.macs_executed, 64 * 64);
        assert_eq!(t.counts.binary_ops, 0);
    }

    #[test]
    fn half_the_members_skipped() {
        // 4 of 8 proxies are zero and their 28 members are all skipped. The
        // 8 proxies take one round, then 28 members fill 4 more rounds.
        let cfg = unconstrained();
        let base = schedule_layer(&dense_fc(64, 64, &cfg), &cfg).unwrap();
        let t = schedule_layer(&clustered_fc(4, &cfg), &cfg).unwrap();
        assert_eq!(t.counts.macs_executed, 36 * 64);
        assert_eq!(t.counts.macs_executed * 2, base.counts.macs_executed + 8 * 64);
        assert_eq!(t.counts.cycles, 40);
        assert_eq!(t.counts.binary_dots, 28);
        assert_eq!(t.counts.dram_weight_bytes, 36 * 64);
        assert_eq!(t.counts.dram_predictor_bytes, 28 * (8 + PARAM_STAGING_BYTES));
    }

    #[test]
    fn zero_size_layer_is_empty() {
        let cfg = AccelConfig::default();
        let lw = LayerWork {
            row_len: 4,
            positions: 1,
            blocks: row_blocks(&fc(1, 4), &Shape::new(vec![4]), &cfg).unwrap(),
            work: vec![],
        };
        let t = schedule_layer(&lw, &cfg).unwrap();
        assert_eq!(t.counts.cycles, 0);
        assert!(t.events.is_empty());
    }

    #[test]
    fn oversized_rows_and_inputs_are_configuration_errors() {
        let cfg = AccelConfig::default();
        let lw = dense_fc(2, 2048, &cfg);
        assert!(matches!(schedule_layer(&lw, &cfg), Err(Error::Config(_))));
        let huge = fc(1, 20_000);
        assert!(matches!(
            row_blocks(&huge, &Shape::new(vec![20_000]), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_blocks_cover_all_positions_within_sram() {
        let g = ConvGeometry {
            in_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let l = LayerDesc::conv(2, g, vec![1; 72]).unwrap();
        let shape = Shape::new(vec![4, 31, 40]);
        for cap in [200usize, 600, 1000, 5000, 1 << 20] {
            let cfg = AccelConfig {
                input_sram_bytes: cap,
                ..Default::default()
            };
            let blocks = row_blocks(&l, &shape, &cfg).unwrap();
            let positions = l.positions(&shape).unwrap();
            let mut next = 0;
            for b in &blocks {
                assert_eq!(b.positions.start, next);
                assert!(b.input_bytes as usize <= cap);
                next = b.positions.end;
            }
            assert_eq!(next, positions);
        }
        let tiny = AccelConfig {
            input_sram_bytes: 8,
            ..Default::default()
        };
        assert!(row_blocks(&l, &shape, &tiny).is_err());
    }

    fn check_work_conservation(t: &LayerTrace, cfg: &AccelConfig) {
        let mut by_unit: std::collections::BTreeMap<Unit, Vec<&TraceEvent>> = Default::default();
        for e in &t.events {
            let width = match e.unit {
                Unit::Cu(_) => cfg.cu_width,
                Unit::BinCu(_) => cfg.bincu_width,
            } as u64;
            assert!(e.ops <= (e.end - e.start) * width);
            by_unit.entry(e.unit).or_default().push(e);
        }
        for events in by_unit.values_mut() {
            events.sort_by_key(|e| e.start);
            for w in events.windows(2) {
                assert!(w[0].end <= w[1].start, "overlap on {:?}", w[0].unit);
            }
        }
    }

    proptest! {
        #[test]
        fn units_never_exceed_their_width(
            skip_clusters in 0usize..=8,
            latency in 0u64..100,
            bw in proptest::option::of(1.0f64..64.0),
            fifo in 1usize..64,
        ) {
            let cfg = AccelConfig {
                member_fifo: fifo,
                dram: DramConfig { latency_cycles: latency, bandwidth_bytes_per_cycle: bw, ..Default::default() },
                ..Default::default()
            };
            let lw = clustered_fc(skip_clusters, &cfg);
            let t = schedule_layer(&lw, &cfg).unwrap();
            check_work_conservation(&t, &cfg);
            let c = t.counts;
            prop_assert_eq!(c.macs_executed + c.macs_skipped, 64 * 64);
            prop_assert!(c.cycles >= c.macs_executed.div_ceil((cfg.num_cus * cfg.cu_width) as u64));
            prop_assert_eq!(c.dram_weight_bytes, c.elements_evaluated * 64);
        }

        #[test]
        fn dense_cycles_ignore_storage_order(seed in any::<u64>(), n in 1usize..80, k in 1usize..200) {
            use rand::{seq::SliceRandom, SeedableRng};
            let cfg = AccelConfig::default();
            let base = dense_fc(n, k, &cfg);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = LayerWork::dense(&fc(n, k), &Shape::new(vec![k]), &order, &cfg).unwrap();
            prop_assert_eq!(schedule_layer(&base, &cfg).unwrap().counts, schedule_layer(&shuffled, &cfg).unwrap().counts);
        }
    }
}
