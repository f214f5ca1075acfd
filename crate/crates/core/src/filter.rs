//! Cross-modal gating: each modality's attended representation is squashed
//! with `tanh` and scaled by a sigmoid gate computed from the cross-modal
//! representation.

use rand::Rng;

use crate::autodiff::{uniform, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// One modality's gate: `cross_dim × out_dim` weights plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub cross_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GateParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        prefix: &str,
        cross_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = 1.0 / (cross_dim as f64).sqrt();
        Ok(Self {
            cross_dim,
            out_dim,
            weight: ps.insert(format!("{prefix}.weight"), uniform(rng, vec![cross_dim, out_dim], limit))?,
            bias: ps.insert(format!("{prefix}.bias"), Tensor::zeros(vec![1, out_dim]))?,
        })
    }

    pub fn from_set(ps: &ParameterSet, prefix: &str, cross_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            cross_dim,
            out_dim,
            weight: ps.require(&format!("{prefix}.weight"), &[cross_dim, out_dim])?,
            bias: ps.require(&format!("{prefix}.bias"), &[1, out_dim])?,
        })
    }

    pub fn param_count(cross_dim: usize, out_dim: usize) -> usize {
        cross_dim * out_dim + out_dim
    }
}

/// `tanh(modality) ⊙ σ(cross · W + b)`, row-wise over `n × 2d` and `n × 3d`.
pub fn filter_modality(tape: &mut Tape, ps: &ParameterSet, gate: &GateParams, modality: Var, cross: Var) -> Result<Var> {
    let (n, dm) = tape.value(modality).dims2()?;
    let (nc, dc) = tape.value(cross).dims2()?;
    if n != nc || dm != gate.out_dim || dc != gate.cross_dim {
        return Err(shape_err(
            "filter_modality",
            format!("modality [{n}×{dm}], cross [{nc}×{dc}], gate {}→{}", gate.cross_dim, gate.out_dim),
        ));
    }
    let w = tape.param(ps, gate.weight)?;
    let b = tape.param(ps, gate.bias)?;
    let pre = tape.matmul(cross, w)?;
    let pre = tape.add_row(pre, b)?;
    let g = tape.sigmoid(pre)?;
    let squashed = tape.tanh(modality)?;
    tape.mul(squashed, g)
}

/// `h'^A ⊕ h'^T ⊕ ĥ^{AT}` along the feature axis.
pub fn fuse_representation(tape: &mut Tape, audio: Var, text: Var, cross: Var) -> Result<Var> {
    tape.concat(&[audio, text, cross], 1)
}
