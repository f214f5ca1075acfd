use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// MFCC coefficients per acoustic frame.
pub const MFCC_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub tokens: Vec<String>,
    /// `F × 128` MFCC matrix.
    pub acoustic_frames: Option<Tensor>,
    pub sarcasm: bool,
    pub humor: bool,
}

impl UtteranceRecord {
    pub fn label(&self, task: crate::model::Task) -> bool {
        match task {
            crate::model::Task::Sarcasm => self.sarcasm,
            crate::model::Task::Humor => self.humor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub dialog_id: String,
    pub utterances: Vec<UtteranceRecord>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn has_acoustics(&self) -> bool {
        self.utterances.iter().all(|u| u.acoustic_frames.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Validation {
            entity: format!("dialog {}", self.dialog_id),
            reason,
        };
        if self.utterances.is_empty() {
            return Err(bad("dialog has no utterances".into()));
        }
        for u in &self.utterances {
            let bad = |reason: String| Error::Validation {
                entity: format!("dialog {} utterance {}", self.dialog_id, u.id),
                reason,
            };
            if u.tokens.is_empty() {
                return Err(bad("empty token list".into()));
            }
            if let Some(frames) = &u.acoustic_frames {
                if frames.rank() != 2 || frames.cols() != MFCC_DIM {
                    return Err(bad(format!(
                        "acoustic frames have shape {:?}, expected F×{MFCC_DIM}",
                        frames.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawDialog {
    dialog_id: String,
    utterances: Vec<RawUtterance>,
}

#[derive(Serialize, Deserialize)]
struct RawUtterance {
    id: String,
    speaker: String,
    tokens: Vec<String>,
    sarcasm: u8,
    humor: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mfcc: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mfcc_path: Option<PathBuf>,
}

fn binary(v: u8, what: &str, entity: impl FnOnce() -> String) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Validation {
            entity: entity(),
            reason: format!("{what} label {other} is not 0 or 1"),
        }),
    }
}

/// `F × 128` frames from a header-less CSV sidecar.
pub fn read_mfcc_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Sidecar {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Sidecar {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Sidecar {
                path: path.to_path_buf(),
                reason: format!("row {}: {e}", i + 1),
            })?;
        rows.push(row);
    }
    frames_from_rows(rows).map_err(|reason| Error::Sidecar {
        path: path.to_path_buf(),
        reason,
    })
}

fn frames_from_rows(rows: Vec<Vec<f64>>) -> std::result::Result<Tensor, String> {
    if rows.is_empty() {
        return Err("no frames".into());
    }
    let cols = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(format!("frame {} has {} coefficients, frame 1 has {cols}", i + 1, r.len()));
    }
    if cols == 0 {
        return Err("frames have no coefficients".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite coefficient".into());
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

/// Load a JSON-lines corpus. Sidecar paths resolve against the corpus file's
/// directory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut dialogs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialog = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            source,
        })?;
        let dialog = convert(raw, &base)?;
        dialog.validate()?;
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

fn convert(raw: RawDialog, base: &Path) -> Result<Dialog> {
    let did = raw.dialog_id;
    let mut utterances = Vec::with_capacity(raw.utterances.len());
    for u in raw.utterances {
        let entity = || format!("dialog {did} utterance {}", u.id);
        let sarcasm = binary(u.sarcasm, "sarcasm", entity)?;
        let humor = binary(u.humor, "humor", entity)?;
        let acoustic_frames = match (u.mfcc, u.mfcc_path) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation {
                    entity: entity(),
                    reason: "both `mfcc` and `mfcc_path` given".into(),
                })
            }
            (Some(rows), None) => Some(frames_from_rows(rows).map_err(|reason| Error::Validation {
                entity: entity(),
                reason,
            })?),
            (None, Some(p)) => Some(read_mfcc_csv(&base.join(p))?),
            (None, None) => None,
        };
        utterances.push(UtteranceRecord {
            id: u.id,
            speaker: u.speaker,
            tokens: u.tokens,
            acoustic_frames,
            sarcasm,
            humor,
        });
    }
    Ok(Dialog {
        dialog_id: did,
        utterances,
    })
}

/// Write dialogs as JSON lines with inline MFCC matrices.
pub fn write_corpus(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in dialogs {
        let raw = RawDialog {
            dialog_id: d.dialog_id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| RawUtterance {
                    id: u.id.clone(),
                    speaker: u.speaker.clone(),
                    tokens: u.tokens.clone(),
                    sarcasm: u.sarcasm as u8,
                    humor: u.humor as u8,
                    mfcc: u.acoustic_frames.as_ref().map(Tensor::to_rows),
                    mfcc_path: None,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
