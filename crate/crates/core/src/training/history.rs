use serde::{Deserialize, Serialize};

use crate::alignment::PairLossBreakdown;

/// Batch-mean losses of one pre-training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub steps: usize,
    /// Unweighted pair losses; `total` is the weighted objective.
    pub losses: PairLossBreakdown,
    /// Weighted pair terms in img-txt, txt-aud, aud-img order.
    pub weighted: [f64; 3],
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub pretrain: Vec<PretrainEpoch>,
    pub mmr: Vec<MmrEpoch>,
}

impl LossHistory {
    pub fn pretrain_totals(&self) -> Vec<f64> {
        self.pretrain.iter().map(|e| e.losses.total).collect()
    }

    pub fn mmr_losses(&self) -> Vec<f64> {
        self.mmr.iter().map(|e| e.loss).collect()
    }
}
