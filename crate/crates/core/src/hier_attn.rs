//! Utterance-level hierarchical attention.
//!
//! A stack of stride-1 local attentions of width `X` collapses `N` input
//! vectors to one. Each window is weighted by a per-coordinate softmax across
//! its members, averaged, and passed through a shared affine map and ReLU.
//! Level `l` holds `max(1, N − l·(X − 1))` vectors; when fewer than `X`
//! remain, the final level uses a single truncated window over all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Default local window width.
pub const DEFAULT_WIDTH: usize = 3;

/// `⌈(N − 1) / (X − 1)⌉`: attention levels needed to reach one vector.
pub fn level_count(n: usize, width: usize) -> usize {
    assert!(n >= 1 && width >= 2, "level_count needs N ≥ 1 and X ≥ 2");
    (n - 1).div_ceil(width - 1)
}

/// Size of level `l` for `N` inputs.
pub fn level_size(n: usize, width: usize, level: usize) -> usize {
    n.saturating_sub(level * (width - 1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierAttnParams {
    pub dim: usize,
    pub width: usize,
    /// `d × d`, shared by every level and window.
    pub proj: ParamId,
    /// `1 × d`
    pub bias: ParamId,
}

impl HierAttnParams {
    /// Projection starts at the identity plus small uniform noise.
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        prefix: &str,
        dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width < 2 {
            return Err(Error::InvalidArgument(format!("attention width {width} must be ≥ 2")));
        }
        let mut proj = Tensor::identity(dim);
        for v in proj.data_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        Ok(Self {
            dim,
            width,
            proj: ps.insert(format!("{prefix}.proj"), proj)?,
            bias: ps.insert(format!("{prefix}.bias"), Tensor::zeros(vec![1, dim]))?,
        })
    }

    pub fn from_set(ps: &ParameterSet, prefix: &str, dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            dim,
            width,
            proj: ps.require(&format!("{prefix}.proj"), &[dim, dim])?,
            bias: ps.require(&format!("{prefix}.bias"), &[1, dim])?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        dim * dim + dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    /// Per window: one weight vector per member.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Context vectors produced at this level.
    pub contexts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub width: usize,
    /// Level 0: `ReLU` of the inputs.
    pub base: Vec<Vec<f64>>,
    /// Attention levels 1..=M.
    pub levels: Vec<Level>,
}

impl LevelTrace {
    /// Vector counts per level, level 0 first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.base.len())
            .chain(self.levels.iter().map(|l| l.contexts.len()))
            .collect()
    }
}

/// Softmax weights and the mean of the weighted members (before projection).
fn attend_window(tape: &mut Tape, window: Var) -> Result<(Var, Var)> {
    let members = tape.value(window).rows();
    let weights = tape.softmax_cols(window)?;
    let weighted = tape.mul(weights, window)?;
    let total = tape.sum_rows(weighted)?;
    let mean = tape.scale(total, 1.0 / members as f64)?;
    Ok((weights, mean))
}

/// Attention over one window (`k × d`, `1 ≤ k ≤ X`). Returns the `k × d`
/// weights and the `1 × d` context `ReLU(proj · mean + bias)`.
pub fn local_attention(tape: &mut Tape, ps: &ParameterSet, p: &HierAttnParams, window: Var) -> Result<(Var, Var)> {
    let (k, d) = tape.value(window).dims2()?;
    if k == 0 || k > p.width || d != p.dim {
        return Err(shape_err("local_attention", format!("window [{k}×{d}] for X={} d={}", p.width, p.dim)));
    }
    let (weights, mean) = attend_window(tape, window)?;
    let context = project(tape, ps, p, mean)?;
    Ok((weights, context))
}

fn project(tape: &mut Tape, ps: &ParameterSet, p: &HierAttnParams, x: Var) -> Result<Var> {
    let w = tape.param(ps, p.proj)?;
    let b = tape.param(ps, p.bias)?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    tape.relu(y)
}

/// Collapse `N × d` vectors to a `1 × d` summary. With `record`, the full
/// level trace is returned as well.
pub fn hier_attend(
    tape: &mut Tape,
    ps: &ParameterSet,
    p: &HierAttnParams,
    vectors: Var,
    record: bool,
) -> Result<(Var, Option<LevelTrace>)> {
    let (n, d) = tape.value(vectors).dims2()?;
    if d != p.dim {
        return Err(shape_err("hier_attend", format!("vectors have width {d}, expected {}", p.dim)));
    }
    let mut current = tape.relu(vectors)?;
    let mut trace = record.then(|| LevelTrace {
        width: p.width,
        base: tape.value(current).to_rows(),
        levels: Vec::new(),
    });
    let mut count = n;
    while count > 1 {
        let width = p.width.min(count);
        let windows = count - width + 1;
        let mut means = Vec::with_capacity(windows);
        let mut level_weights = Vec::new();
        for k in 0..windows {
            let window = tape.narrow(current, 0, k, width)?;
            let (weights, mean) = attend_window(tape, window)?;
            if record {
                level_weights.push(tape.value(weights).to_rows());
            }
            means.push(mean);
        }
        let stacked = tape.concat(&means, 0)?;
        current = project(tape, ps, p, stacked)?;
        if let Some(tr) = trace.as_mut() {
            tr.levels.push(Level {
                weights: level_weights,
                contexts: tape.value(current).to_rows(),
            });
        }
        count = windows;
    }
    Ok((current, trace))
}
