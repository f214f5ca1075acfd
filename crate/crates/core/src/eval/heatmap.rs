use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context_attn::DialogAttentionTrace;
use crate::error::{Error, Result};

/// Scalar weights per context utterance. Modalities the model does not read
/// are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeatmapWeights {
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub cross_audio: Vec<f64>,
    pub cross_text: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    /// 1-based target utterance.
    pub target_i: usize,
    /// 1-based context utterances, oldest first.
    pub window: Vec<usize>,
    pub weights: HeatmapWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub dialog_id: String,
    #[serde(rename = "D")]
    pub width: usize,
    pub rows: Vec<HeatmapRow>,
}

impl Heatmap {
    pub fn from_trace(trace: &DialogAttentionTrace, dialog_id: &str) -> Result<Self> {
        if trace.rows.is_empty() {
            return Err(Error::InvalidArgument(format!("empty attention trace for dialog `{dialog_id}`")));
        }
        let rows = trace
            .rows
            .iter()
            .map(|r| HeatmapRow {
                target_i: r.target + 1,
                window: r.window.iter().map(|j| j + 1).collect(),
                weights: HeatmapWeights {
                    text: r.text.clone().unwrap_or_default(),
                    audio: r.audio.clone().unwrap_or_default(),
                    cross_audio: r.cross_audio.clone().unwrap_or_default(),
                    cross_text: r.cross_text.clone().unwrap_or_default(),
                },
            })
            .collect();
        Ok(Self {
            dialog_id: dialog_id.to_string(),
            width: trace.width,
            rows,
        })
    }

    /// Dense `n × n` matrix of one field (`"text"`, `"audio"`, `"cross_audio"`,
    /// `"cross_text"`); cells outside each window are zero.
    pub fn dense(&self, field: &str) -> Option<Vec<Vec<f64>>> {
        let n = self.rows.len();
        let mut out = vec![vec![0.0; n]; n];
        for (i, r) in self.rows.iter().enumerate() {
            let w = match field {
                "text" => &r.weights.text,
                "audio" => &r.weights.audio,
                "cross_audio" => &r.weights.cross_audio,
                "cross_text" => &r.weights.cross_text,
                _ => return None,
            };
            for (&j, &v) in r.window.iter().zip(w) {
                out[i][j - 1] = v;
            }
        }
        Some(out)
    }
}

pub fn export_heatmap(trace: &DialogAttentionTrace, dialog_id: &str, path: impl AsRef<Path>) -> Result<Heatmap> {
    let map = Heatmap::from_trace(trace, dialog_id)?;
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(map)
}
