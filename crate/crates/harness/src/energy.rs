//! Per-scan energy under the proportional model: a scan costs
//! `E_full · (1 − sparsity)`.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub name: String,
    /// Joules per full scan.
    pub full_scan_joules: f64,
}

impl EnergyModel {
    pub fn hdl32e() -> Self {
        Self { name: "HDL-32E".into(), full_scan_joules: 0.6 }
    }

    pub fn hdl64e() -> Self {
        Self { name: "HDL-64E".into(), full_scan_joules: 6.0 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "").as_str() {
            "hdl32e" => Ok(Self::hdl32e()),
            "hdl64e" => Ok(Self::hdl64e()),
            _ => Err(HarnessError::Config(format!("unknown energy model {name:?} (expected HDL-32E or HDL-64E)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.full_scan_joules > 0.0) {
            return Err(HarnessError::Config("energy model: full-scan energy must be positive".into()));
        }
        Ok(())
    }

    pub fn scan_joules(&self, sparsity: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(HarnessError::Config(format!("sparsity {sparsity} outside [0, 1]")));
        }
        Ok(self.full_scan_joules * (1.0 - sparsity))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub model: String,
    pub scans: usize,
    pub joules_per_scan: f64,
    pub joules_per_sequence: f64,
    pub full_scan_joules_per_sequence: f64,
    pub percent_saved: f64,
}

/// Energy totals for one sequence of per-scan sparsities.
pub fn energy_report(sparsity: &[f64], model: &EnergyModel) -> Result<EnergyReport> {
    model.validate()?;
    let per: Vec<f64> = sparsity.iter().map(|&s| model.scan_joules(s)).collect::<Result<_>>()?;
    let n = per.len();
    let total: f64 = per.iter().sum();
    let full = model.full_scan_joules * n as f64;
    Ok(EnergyReport {
        model: model.name.clone(),
        scans: n,
        joules_per_scan: if n == 0 { 0.0 } else { total / n as f64 },
        joules_per_sequence: total,
        full_scan_joules_per_sequence: full,
        percent_saved: if n == 0 { 0.0 } else { 100.0 * (1.0 - total / full) },
    })
}
