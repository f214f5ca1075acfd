//! Dialog-level contextual attention over a sliding window of the current
//! and preceding utterances, per modality and across modalities, with a
//! residual concatenation of the current hidden state.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};

/// Default context window: the current and four previous utterances.
pub const DEFAULT_WIDTH: usize = 5;

/// Zero-based window `[max(0, i + 1 − D), i]` for target `i`.
pub fn window(i: usize, width: usize) -> Range<usize> {
    (i + 1).saturating_sub(width)..i + 1
}

fn check_index(tape: &Tape, h: Var, i: usize, width: usize) -> Result<(usize, usize)> {
    let (n, d) = tape.value(h).dims2()?;
    if i >= n {
        return Err(shape_err("context_attn", format!("target {i} out of range for {n} utterances")));
    }
    if width == 0 {
        return Err(shape_err("context_attn", "window width must be ≥ 1"));
    }
    Ok((n, d))
}

/// `(Σ_j w_j ⊙ h_j) / |window| ⊕ h_i` for one modality. Returns the `1 × 2d`
/// representation and the `|window| × d` weights.
pub fn attended_modality(tape: &mut Tape, h: Var, i: usize, width: usize) -> Result<(Var, Var)> {
    check_index(tape, h, i, width)?;
    let win = window(i, width);
    let k = win.len();
    let ctx = tape.narrow(h, 0, win.start, k)?;
    let weights = tape.softmax_cols(ctx)?;
    let weighted = tape.mul(weights, ctx)?;
    let total = tape.sum_rows(weighted)?;
    let mean = tape.scale(total, 1.0 / k as f64)?;
    let current = tape.row(h, i)?;
    Ok((tape.concat(&[mean, current], 1)?, weights))
}

/// Cross-modal attention: weights normalised jointly over the `2·|window|`
/// audio and text states. Returns the `1 × 3d` representation
/// `cross_mean ⊕ h_i^A ⊕ h_i^T` and the `2|window| × d` weights (audio rows
/// first).
pub fn attended_cross(tape: &mut Tape, h_audio: Var, h_text: Var, i: usize, width: usize) -> Result<(Var, Var)> {
    let (na, da) = check_index(tape, h_audio, i, width)?;
    let (nt, dt) = check_index(tape, h_text, i, width)?;
    if (na, da) != (nt, dt) {
        return Err(shape_err("attended_cross", format!("audio [{na}×{da}] vs text [{nt}×{dt}]")));
    }
    let win = window(i, width);
    let k = win.len();
    let ca = tape.narrow(h_audio, 0, win.start, k)?;
    let ct = tape.narrow(h_text, 0, win.start, k)?;
    let both = tape.concat(&[ca, ct], 0)?;
    let weights = tape.softmax_cols(both)?;
    let weighted = tape.mul(weights, both)?;
    let total = tape.sum_rows(weighted)?;
    let mean = tape.scale(total, 1.0 / (2 * k) as f64)?;
    let cur_a = tape.row(h_audio, i)?;
    let cur_t = tape.row(h_text, i)?;
    Ok((tape.concat(&[mean, cur_a, cur_t], 1)?, weights))
}

/// Attention summary for one target utterance. Scalar weights are the mean
/// over coordinates of the per-coordinate weight vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAttention {
    /// Zero-based target index.
    pub target: usize,
    /// Zero-based context indices, oldest first.
    pub window: Vec<usize>,
    pub audio: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub cross_audio: Option<Vec<f64>>,
    pub cross_text: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogAttentionTrace {
    pub width: usize,
    pub rows: Vec<TargetAttention>,
}

fn coordinate_means(tape: &Tape, weights: Var, rows: Range<usize>) -> Vec<f64> {
    let w = tape.value(weights);
    rows.map(|r| {
        let row = w.row_slice(r);
        row.iter().sum::<f64>() / row.len() as f64
    })
    .collect()
}

#[derive(Clone, Debug)]
pub struct ContextOutput {
    /// `n × 2d`
    pub audio: Option<Var>,
    /// `n × 2d`
    pub text: Option<Var>,
    /// `n × 3d`, present when both modalities are.
    pub cross: Option<Var>,
    pub trace: DialogAttentionTrace,
}

/// Apply the windowed attention at every position for whichever modalities
/// are present.
pub fn contextualize_dialog(
    tape: &mut Tape,
    h_audio: Option<Var>,
    h_text: Option<Var>,
    width: usize,
) -> Result<ContextOutput> {
    let n = match (h_audio, h_text) {
        (Some(a), Some(t)) => {
            if tape.shape(a) != tape.shape(t) {
                return Err(shape_err(
                    "contextualize_dialog",
                    format!("audio {:?} vs text {:?}", tape.shape(a), tape.shape(t)),
                ));
            }
            tape.value(a).rows()
        }
        (Some(h), None) | (None, Some(h)) => tape.value(h).rows(),
        (None, None) => return Err(shape_err("contextualize_dialog", "no modality given")),
    };
    let mut rows_a = Vec::new();
    let mut rows_t = Vec::new();
    let mut rows_x = Vec::new();
    let mut trace = DialogAttentionTrace {
        width,
        rows: Vec::with_capacity(n),
    };
    for i in 0..n {
        let win = window(i, width);
        let k = win.len();
        let mut row = TargetAttention {
            target: i,
            window: win.clone().collect(),
            audio: None,
            text: None,
            cross_audio: None,
            cross_text: None,
        };
        if let Some(h) = h_audio {
            let (v, w) = attended_modality(tape, h, i, width)?;
            row.audio = Some(coordinate_means(tape, w, 0..k));
            rows_a.push(v);
        }
        if let Some(h) = h_text {
            let (v, w) = attended_modality(tape, h, i, width)?;
            row.text = Some(coordinate_means(tape, w, 0..k));
            rows_t.push(v);
        }
        if let (Some(a), Some(t)) = (h_audio, h_text) {
            let (v, w) = attended_cross(tape, a, t, i, width)?;
            row.cross_audio = Some(coordinate_means(tape, w, 0..k));
            row.cross_text = Some(coordinate_means(tape, w, k..2 * k));
            rows_x.push(v);
        }
        trace.rows.push(row);
    }
    let stack = |tape: &mut Tape, rows: &[Var]| -> Result<Option<Var>> {
        if rows.is_empty() {
            Ok(None)
        } else {
            tape.concat(rows, 0).map(Some)
        }
    };
    Ok(ContextOutput {
        audio: stack(tape, &rows_a)?,
        text: stack(tape, &rows_t)?,
        cross: stack(tape, &rows_x)?,
        trace,
    })
}
