use serde::{Deserialize, Serialize};

use super::config::CostModel;
use super::schedule::LayerCounts;

/// Energy per component. `predictor` overlaps the others: it is the part of
/// `binary`, `binweight_sram` and `dram` spent on the binary path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mac: f64,
    pub binary: f64,
    pub input_sram: f64,
    pub binweight_sram: f64,
    pub cu_buffer: f64,
    pub dram: f64,
    pub static_energy: f64,
    pub predictor: f64,
}

impl EnergyBreakdown {
    pub fn dynamic(&self) -> f64 {
        self.mac + self.binary + self.input_sram + self.binweight_sram + self.cu_buffer + self.dram
    }

    pub fn total(&self) -> f64 {
        self.dynamic() + self.static_energy
    }

    /// Fraction of the total spent on the predictor hardware.
    pub fn predictor_share(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            self.predictor / t
        }
    }
}

pub fn energy_report(c: &LayerCounts, cost: &CostModel) -> EnergyBreakdown {
    let binary = c.binary_ops as f64 * cost.binary_op;
    let binweight_sram = c.binweight_sram_read_bytes as f64 * cost.binweight_sram_byte;
    let dram_bytes = c.dram_read_bytes() + c.dram_write_bytes;
    EnergyBreakdown {
        mac: c.macs_executed as f64 * cost.mac,
        binary,
        input_sram: c.input_sram_read_bytes as f64 * cost.input_sram_byte,
        binweight_sram,
        cu_buffer: (c.cu_buffer_read_bytes + c.cu_buffer_write_bytes) as f64 * cost.cu_buffer_byte,
        dram: dram_bytes as f64 * cost.dram_byte,
        static_energy: c.cycles as f64 * cost.static_per_cycle,
        predictor: binary + binweight_sram + c.dram_predictor_bytes as f64 * cost.dram_byte,
    }
}
