//! Round records, experiment summaries, and communication accounting.
//!
//! The metrics stream is one JSON object per round, append-only, and
//! excludes wall-clock time so that identical seeded runs produce
//! byte-identical streams. Byte counts assume 32-bit floats on the wire
//! (the checkpoint precision).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const WIRE_BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceRoundMetrics {
    pub device_id: usize,
    pub modality_count: usize,
    /// Public-shard stage loss: the full CCL objective under the
    /// collaborative modes, supervised-only under the baselines.
    pub ccl_loss: f64,
    pub amt_loss: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerRoundMetrics {
    /// Unified-model loss (SE-CCL objective, or the supervised loss when
    /// the mode trains the server on labels only). Absent when the mode
    /// never trains the server model.
    pub llm_loss: Option<f64>,
    /// Server SLM loss during SE-CCL; absent when the stage is skipped.
    pub slm_loss: Option<f64>,
    pub test_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub devices: Vec<DeviceRoundMetrics>,
    pub server: ServerRoundMetrics,
    pub aggregation_weights: Vec<f64>,
    pub uplink_params: u64,
    pub uplink_bytes: u64,
    pub downlink_params: u64,
    pub downlink_bytes: u64,
    /// Not serialized: wall time would break byte-identical replay.
    #[serde(skip)]
    pub wall_ms: f64,
}

impl RoundReport {
    /// One line of the metrics stream (no trailing newline).
    pub fn stream_line(&self) -> String {
        serde_json::to_string(self).expect("round report serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCurves {
    pub device_ccl: Vec<Vec<f64>>,
    pub device_amt: Vec<Vec<f64>>,
    pub server_llm: Vec<Option<f64>>,
    pub server_slm: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub per_device_f1: Vec<f64>,
    pub avg_f1: f64,
    pub best_f1: f64,
    pub worst_f1: f64,
    pub server_f1: f64,
    pub loss_curves: LossCurves,
    pub total_uplink_params: u64,
    pub total_uplink_bytes: u64,
    pub total_downlink_params: u64,
    pub total_downlink_bytes: u64,
}

impl Summary {
    pub fn from_reports(mode: &str, seed: u64, reports: &[RoundReport]) -> Result<Self> {
        let last = reports.last().ok_or(Error::Empty { what: "round reports" })?;
        let per_device_f1: Vec<f64> = last.devices.iter().map(|d| d.test_f1).collect();
        let (avg_f1, best_f1, worst_f1) = crate::metrics::aggregate_metrics(&per_device_f1)?;
        let n_devices = last.devices.len();
        let device_curve = |pick: fn(&DeviceRoundMetrics) -> f64| -> Vec<Vec<f64>> {
            (0..n_devices)
                .map(|j| reports.iter().map(|r| pick(&r.devices[j])).collect())
                .collect()
        };
        Ok(Summary {
            mode: mode.to_string(),
            seed,
            rounds: reports.len(),
            per_device_f1,
            avg_f1,
            best_f1,
            worst_f1,
            server_f1: last.server.test_f1,
            loss_curves: LossCurves {
                device_ccl: device_curve(|d| d.ccl_loss),
                device_amt: device_curve(|d| d.amt_loss),
                server_llm: reports.iter().map(|r| r.server.llm_loss).collect(),
                server_slm: reports.iter().map(|r| r.server.slm_loss).collect(),
            },
            total_uplink_params: reports.iter().map(|r| r.uplink_params).sum(),
            total_uplink_bytes: reports.iter().map(|r| r.uplink_bytes).sum(),
            total_downlink_params: reports.iter().map(|r| r.downlink_params).sum(),
            total_downlink_bytes: reports.iter().map(|r| r.downlink_bytes).sum(),
        })
    }
}

/// Transmitted fraction of the total parameter volume.
pub fn comm_ratio(uplink_params: u64, total_device_params: u64) -> Result<f64> {
    if total_device_params == 0 {
        return Err(Error::InvalidArgument {
            detail: "total parameter count must be > 0".into(),
        });
    }
    Ok(uplink_params as f64 / total_device_params as f64)
}

/// Communication fixture at published-model scale: a 720M-parameter GPT-2
/// style backbone (36 blocks, width 1280, four attention projection
/// matrices per block) carrying rank-`r` adapters on the projections, plus
/// one fused 1280-wide vector per public training sample (2,178 = 90% of a
/// quarter of a 9,680-clip corpus).
#[derive(Debug, Clone, Serialize)]
pub struct PaperScaleFixture {
    pub total_params: u64,
    pub adapter_params: u64,
    pub fused_payload: u64,
    pub rank: usize,
}

impl PaperScaleFixture {
    pub fn new(rank: usize) -> Self {
        let blocks = 36u64;
        let width = 1280u64;
        let projections = 4u64;
        let adapter_params = blocks * projections * rank as u64 * (width + width);
        let public_train_samples = 2178u64;
        Self {
            total_params: 720_000_000,
            adapter_params,
            fused_payload: public_train_samples * width,
            rank,
        }
    }

    /// Per-round transmitted fraction: adapters + modality-count scalar +
    /// fused representations, over the total deployed parameters.
    pub fn ratio(&self) -> f64 {
        comm_ratio(self.adapter_params + 1 + self.fused_payload, self.total_params)
            .expect("nonzero total")
    }
}
