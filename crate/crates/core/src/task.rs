use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};

/// The five dense prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Semseg,
    Depth,
    Normal,
    Boundary,
    Saliency,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Semseg,
        TaskId::Depth,
        TaskId::Normal,
        TaskId::Boundary,
        TaskId::Saliency,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Semseg => "semseg",
            TaskId::Depth => "depth",
            TaskId::Normal => "normal",
            TaskId::Boundary => "boundary",
            TaskId::Saliency => "saliency",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "semseg" => Ok(TaskId::Semseg),
            "depth" => Ok(TaskId::Depth),
            "normal" => Ok(TaskId::Normal),
            "boundary" => Ok(TaskId::Boundary),
            "saliency" => Ok(TaskId::Saliency),
            other => Err(IcmError::Config(format!("unknown task: {other}"))),
        }
    }

    pub fn wire_id(&self) -> u8 {
        match self {
            TaskId::Semseg => 0,
            TaskId::Depth => 1,
            TaskId::Normal => 2,
            TaskId::Boundary => 3,
            TaskId::Saliency => 4,
        }
    }

    pub fn from_wire(b: u8) -> Result<TaskId> {
        match b {
            0 => Ok(TaskId::Semseg),
            1 => Ok(TaskId::Depth),
            2 => Ok(TaskId::Normal),
            3 => Ok(TaskId::Boundary),
            4 => Ok(TaskId::Saliency),
            other => Err(IcmError::CorruptStream(format!("bad task id {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
    Cosine,
    WeightedBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Miou,
    Rmse,
    MeanAngularError,
    MaxF,
    OdsF,
}

impl MetricKind {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Miou | MetricKind::MaxF | MetricKind::OdsF)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Miou => "miou",
            MetricKind::Rmse => "rmse",
            MetricKind::MeanAngularError => "merr",
            MetricKind::MaxF => "maxf",
            MetricKind::OdsF => "odsf",
        }
    }
}

/// Static description of one task's heads, loss and metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub channels: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
    /// Semantic classes for segmentation-style tasks (0 otherwise).
    pub num_classes: usize,
}

impl TaskSpec {
    pub fn for_task(id: TaskId, num_classes: usize) -> TaskSpec {
        match id {
            TaskId::Semseg => TaskSpec {
                id,
                channels: num_classes,
                loss: LossKind::CrossEntropy,
                metric: MetricKind::Miou,
                num_classes,
            },
            TaskId::Depth => TaskSpec {
                id,
                channels: 1,
                loss: LossKind::L1,
                metric: MetricKind::Rmse,
                num_classes: 0,
            },
            TaskId::Normal => TaskSpec {
                id,
                channels: 3,
                loss: LossKind::Cosine,
                metric: MetricKind::MeanAngularError,
                num_classes: 0,
            },
            TaskId::Boundary => TaskSpec {
                id,
                channels: 1,
                loss: LossKind::WeightedBce,
                metric: MetricKind::OdsF,
                num_classes: 0,
            },
            TaskId::Saliency => TaskSpec {
                id,
                channels: 1,
                loss: LossKind::WeightedBce,
                metric: MetricKind::MaxF,
                num_classes: 0,
            },
        }
    }
}
