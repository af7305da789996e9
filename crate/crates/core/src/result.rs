use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{Handle, Membership};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub fdp_estimate: f64,
}

/// Everything that happened during a run, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum AuditEvent {
    Init { n: usize, m: usize, k: usize, alpha: f64 },
    Screened { handle: Handle, membership: Membership },
    LabelRevealed { handle: Handle, y: f64 },
    PolicyUpdate { policy: String, detail: String },
    PolicyChange { from: String, to: String },
    Note { message: String },
    PValues { values: Vec<f64> },
    Stopped { fdp_estimate: f64 },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: usize,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Indices into the dataset's test partition, ascending.
    pub selected: Vec<usize>,
    /// Step at which screening stopped; `None` for one-shot BH selection.
    pub stopping_step: Option<usize>,
    /// True when the pool ran dry before the estimate reached `alpha`.
    pub exhausted: bool,
    pub alpha: f64,
    pub seed: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub audit: Vec<AuditEntry>,
}

impl SelectionResult {
    pub fn final_fdp_estimate(&self) -> Option<f64> {
        self.trajectory.last().map(|p| p.fdp_estimate)
    }
}
