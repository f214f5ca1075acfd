//! Metrics, attention heatmaps and run reports.

mod heatmap;
mod metrics;
mod report;

pub use heatmap::{export_heatmap, Heatmap, HeatmapRow, HeatmapWeights};
pub use metrics::{compute_metrics, confusion, majority_baseline_f1, ConfusionMatrix, Metrics};
pub use report::{json_twin, render_report, Report};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::Result;
use crate::model::{DialogFeatures, Model, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: Task,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

impl TaskEvaluation {
    pub fn from_confusion(task: Task, confusion: ConfusionMatrix) -> Self {
        Self {
            task,
            confusion,
            metrics: compute_metrics(&confusion),
        }
    }
}

/// Eval-mode scoring with `probability ≥ threshold` as the positive call.
pub fn evaluate_features(
    model: &Model,
    ps: &ParameterSet,
    feats: &[DialogFeatures],
    threshold: f64,
) -> Result<Vec<TaskEvaluation>> {
    let preds = feats
        .par_iter()
        .map(|f| model.predict(ps, f, false))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &task in model.config().task_mode.tasks() {
        let mut m = ConfusionMatrix::default();
        for (f, p) in feats.iter().zip(&preds) {
            let probs = p.probabilities_for(task).unwrap_or_default();
            let labels = f.labels_for(task).unwrap_or_default();
            for (&prob, &label) in probs.iter().zip(labels) {
                m.record(prob >= threshold, label >= 0.5);
            }
        }
        out.push(TaskEvaluation::from_confusion(task, m));
    }
    Ok(out)
}
