use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TaskEvaluation;
use crate::error::Result;
use crate::model::{parameter_count, ModelConfig};
use crate::train::TrainHistory;

/// Machine-readable twin of the text report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub task_mode: String,
    pub parameters: usize,
    pub config: ModelConfig,
    pub history: TrainHistory,
    pub evaluation: Vec<TaskEvaluation>,
}

impl Report {
    pub fn new(history: &TrainHistory, evaluation: &[TaskEvaluation], config: &ModelConfig) -> Self {
        Self {
            variant: config.variant_name().unwrap_or("custom").to_string(),
            task_mode: config.task_mode.name().to_string(),
            parameters: parameter_count(config),
            config: config.clone(),
            history: history.clone(),
            evaluation: evaluation.to_vec(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "== {} ==", self.variant);
        let _ = writeln!(s, "task mode: {}", self.task_mode);
        let _ = writeln!(s, "parameters: {}", self.parameters);
        if !self.history.is_empty() {
            let tasks: Vec<_> = self.history.epochs[0].val.iter().map(|v| v.task.name()).collect();
            let _ = writeln!(s, "\n-- training --");
            let _ = write!(s, "{:>5} {:>10}", "epoch", "loss");
            for t in &tasks {
                let _ = write!(s, " {:>12}", format!("{t} val F1"));
            }
            s.push('\n');
            for e in &self.history.epochs {
                let mark = if Some(e.epoch) == self.history.best_epoch { " *" } else { "" };
                let _ = write!(s, "{:>5} {:>10.6}", e.epoch, e.train_loss);
                for v in &e.val {
                    let _ = write!(s, " {:>12.4}", v.metrics.f1);
                }
                let _ = writeln!(s, "{mark}");
            }
            if let Some(b) = self.history.best_epoch {
                let _ = writeln!(s, "best epoch: {b}{}", if self.history.stopped_early { " (stopped early)" } else { "" });
            }
        }
        let _ = writeln!(s, "\n-- evaluation --");
        for ev in &self.evaluation {
            let (c, m) = (&ev.confusion, &ev.metrics);
            let _ = writeln!(s, "{}:", ev.task);
            let _ = writeln!(s, "  confusion  tp={} fn={} fp={} tn={}", c.tp, c.fn_, c.fp, c.tn);
            let _ = writeln!(
                s,
                "  precision {:.4}  recall {:.4}  F1 {:.4}  accuracy {:.4}",
                m.precision, m.recall, m.f1, m.accuracy
            );
        }
        s
    }
}

/// Path of the JSON twin for a text report path.
pub fn json_twin(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the text report to `path` and its JSON twin next to it.
pub fn render_report(
    history: &TrainHistory,
    evaluation: &[TaskEvaluation],
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<Report> {
    let path = path.as_ref();
    let report = Report::new(history, evaluation, config);
    fs::write(path, report.to_text())?;
    fs::write(json_twin(path), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
