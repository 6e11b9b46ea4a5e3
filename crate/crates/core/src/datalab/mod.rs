//! Training-data preparation and reward math.

mod dataset;
mod grpo;
mod reward;
mod sample;

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::executor::HistorySummary;
use crate::sim::{BBox, ScreenSnapshot};

pub use dataset::{read_jsonl, write_jsonl, DatasetHeader, DatasetRecord, DATASET_VERSION};
pub use grpo::{evaluate_group, group_advantages, grpo_objective, kl_k3, GroupEvaluation, GrpoError};
pub use reward::{
    score_accuracy, score_final, score_format, score_response, token_f1, Accuracy, RewardBreakdown, RewardConfig,
    DEFAULT_ALPHA, DEFAULT_F1_THRESHOLD,
};
pub use sample::{
    augment_multipath, count_correct, filter_by_difficulty, split_trajectory, DEFAULT_KEEP_ZERO_FRACTION,
    DIFFICULTY_RUNS,
};

/// Another action that is as good as the gold one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternate {
    pub action: Action,
    /// Target region for coordinate actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

/// One step-wise training unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub instruction: String,
    pub history: HistorySummary,
    pub snapshot: ScreenSnapshot,
    pub gold: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_bbox: Option<BBox>,
    #[serde(default)]
    pub alternates: Vec<Alternate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_count: Option<u8>,
    #[serde(default)]
    pub trajectory_id: String,
    #[serde(default)]
    pub step_index: usize,
    #[serde(default)]
    pub corrected: bool,
}

impl StepSample {
    pub fn new(instruction: impl Into<String>, snapshot: ScreenSnapshot, gold: Action) -> Self {
        let gold_bbox = gold.tap_point().map(|p| bbox_for(&snapshot, p.x, p.y));
        Self {
            instruction: instruction.into(),
            history: HistorySummary::default(),
            snapshot,
            gold,
            gold_bbox,
            alternates: Vec::new(),
            difficulty_count: None,
            trajectory_id: String::new(),
            step_index: 0,
            corrected: false,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.gold.tap_point().is_some() != self.gold_bbox.is_some() {
            return Err(DataError::InvalidSample("gold_bbox must be present exactly for coordinate actions".into()));
        }
        if self.alternates.iter().any(|a| a.action == self.gold) {
            return Err(DataError::InvalidSample("alternates repeat the gold action".into()));
        }
        if let Some(c) = self.difficulty_count {
            if c > DIFFICULTY_RUNS {
                return Err(DataError::InvalidSample(format!("difficulty count {c} exceeds {DIFFICULTY_RUNS}")));
            }
        }
        Ok(())
    }
}

/// The widget box under a point, or a 3x3 box centred on it when nothing is
/// there.
pub(crate) fn bbox_for(snapshot: &ScreenSnapshot, x: u32, y: u32) -> BBox {
    match snapshot.hit(x, y) {
        Some(w) if w.bbox.strictly_contains(x, y) => w.bbox,
        _ => BBox::new(x.saturating_sub(1), y.saturating_sub(1), x + 1, y + 1),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("trajectory has no executed steps")]
    EmptyTrajectory,
    #[error("sample {0} has no difficulty count")]
    MissingDifficulty(usize),
    #[error("keep fraction {0} is outside [0, 1]")]
    InvalidFraction(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("line {line}: {reason}")]
    Decode { line: usize, reason: String },
}
