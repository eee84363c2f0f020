use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// External memory: a FIFO pipe with a fixed per-request latency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    pub port_width_bytes: u32,
    /// Requests are rounded up to whole bursts.
    pub burst_bytes: u32,
    pub latency_cycles: u64,
    /// `None` means unlimited.
    pub bandwidth_bytes_per_cycle: Option<f64>,
}

impl Default for DramConfig {
    fn default() -> Self {
        DramConfig {
            port_width_bytes: 8,
            burst_bytes: 64,
            latency_cycles: 64,
            bandwidth_bytes_per_cycle: Some(8.0),
        }
    }
}

impl DramConfig {
    /// Zero latency and unlimited bandwidth.
    pub fn unconstrained() -> Self {
        DramConfig {
            latency_cycles: 0,
            bandwidth_bytes_per_cycle: None,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelConfig {
    pub num_cus: usize,
    /// Int8 MACs per cycle per CU.
    pub cu_width: usize,
    pub num_bincus: usize,
    /// 1-bit operations per cycle per binCU.
    pub bincu_width: usize,
    pub input_sram_bytes: usize,
    pub binweight_sram_bytes: usize,
    pub cu_buffer_bytes: usize,
    pub frequency_mhz: f64,
    /// Unlocked member IDs waiting for a CU.
    pub member_fifo: usize,
    pub dram: DramConfig,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            num_cus: 8,
            cu_width: 8,
            num_bincus: 8,
            bincu_width: 64,
            input_sram_bytes: 16 * 1024,
            binweight_sram_bytes: 2 * 1024,
            cu_buffer_bytes: 1024,
            frequency_mhz: 1200.0,
            member_fifo: 256,
            dram: DramConfig::default(),
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_cus", self.num_cus),
            ("cu_width", self.cu_width),
            ("num_bincus", self.num_bincus),
            ("bincu_width", self.bincu_width),
            ("input_sram_bytes", self.input_sram_bytes),
            ("binweight_sram_bytes", self.binweight_sram_bytes),
            ("cu_buffer_bytes", self.cu_buffer_bytes),
            ("member_fifo", self.member_fifo),
            ("dram.burst_bytes", self.dram.burst_bytes as usize),
            ("dram.port_width_bytes", self.dram.port_width_bytes as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !(self.frequency_mhz.is_finite() && self.frequency_mhz > 0.0) {
            return Err(Error::config("frequency_mhz must be positive"));
        }
        if let Some(bw) = self.dram.bandwidth_bytes_per_cycle {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::config("dram bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

/// Energy per event, in relative units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub mac: f64,
    pub binary_op: f64,
    pub input_sram_byte: f64,
    pub binweight_sram_byte: f64,
    pub cu_buffer_byte: f64,
    pub dram_byte: f64,
    pub static_per_cycle: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mac: 1.0,
            binary_op: 0.05,
            input_sram_byte: 0.1,
            binweight_sram_byte: 0.1,
            cu_buffer_byte: 0.1,
            dram_byte: 20.0,
            static_per_cycle: 2.0,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        CostModel {
            mac: 0.0,
            binary_op: 0.0,
            input_sram_byte: 0.0,
            binweight_sram_byte: 0.0,
            cu_buffer_byte: 0.0,
            dram_byte: 0.0,
            static_per_cycle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mac,
            self.binary_op,
            self.input_sram_byte,
            self.binweight_sram_byte,
            self.cu_buffer_byte,
            self.dram_byte,
            self.static_per_cycle,
        ];
        if !all.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(Error::config("energy costs must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `[accel]` (with `[accel.dram]`) and `[cost]` tables; missing keys keep
/// their defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub accel: AccelConfig,
    pub cost: CostModel,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.accel.validate()?;
        cfg.cost.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
