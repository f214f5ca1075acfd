use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AudioRepr, Modality, ModelConfig, Task, TextRepr};
use crate::autodiff::{glorot, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::context_attn::{contextualize_dialog, DialogAttentionTrace};
use crate::data::{embed_utterance, Dialog, EmbeddingTable, MFCC_DIM};
use crate::encoders::{acoustic_encode, lstm_encode_dialog, AcousticEncoderParams, LstmParams};
use crate::error::{Error, Result};
use crate::filter::{filter_modality, fuse_representation, GateParams};
use crate::hier_attn::{hier_attend, HierAttnParams, LevelTrace};

/// `affine(F → H) → ReLU → dropout → affine(H → 1) → sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub task: Task,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        task: Task,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("head.{task}");
        Ok(Self {
            task,
            w1: ps.insert(format!("{p}.w1"), glorot(rng, vec![in_dim, hidden], in_dim, hidden))?,
            b1: ps.insert(format!("{p}.b1"), Tensor::zeros(vec![1, hidden]))?,
            w2: ps.insert(format!("{p}.w2"), glorot(rng, vec![hidden, 1], hidden, 1))?,
            b2: ps.insert(format!("{p}.b2"), Tensor::zeros(vec![1, 1]))?,
        })
    }

    pub fn from_set(ps: &ParameterSet, task: Task, in_dim: usize, hidden: usize) -> Result<Self> {
        let p = format!("head.{task}");
        Ok(Self {
            task,
            w1: ps.require(&format!("{p}.w1"), &[in_dim, hidden])?,
            b1: ps.require(&format!("{p}.b1"), &[1, hidden])?,
            w2: ps.require(&format!("{p}.w2"), &[hidden, 1])?,
            b2: ps.require(&format!("{p}.b2"), &[1, 1])?,
        })
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        in_dim * hidden + hidden + hidden + 1
    }
}

/// Exact number of scalar parameters for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let h = config.hidden_dim;
    let mut total = 0;
    if config.modality.uses_text() {
        if config.text_repr == TextRepr::Hier {
            total += HierAttnParams::param_count(config.text_dim);
        }
        total += LstmParams::param_count(config.text_dim, h);
    }
    if config.modality.uses_audio() {
        total += match config.audio_repr {
            AudioRepr::Conv => AcousticEncoderParams::param_count(MFCC_DIM, config.acoustic_dim, config.conv_width),
            AudioRepr::Hier => HierAttnParams::param_count(MFCC_DIM),
        };
        total += LstmParams::param_count(config.audio_input_dim(), h);
    }
    if config.use_filter {
        total += 2 * GateParams::param_count(3 * h, 2 * h);
    }
    total + config.task_mode.tasks().len() * HeadParams::param_count(config.fused_dim(), config.head_hidden)
}

/// Parameter handles for one configuration, bound to a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    text_hier: Option<HierAttnParams>,
    text_lstm: Option<LstmParams>,
    audio_conv: Option<AcousticEncoderParams>,
    audio_hier: Option<HierAttnParams>,
    audio_lstm: Option<LstmParams>,
    gate_audio: Option<GateParams>,
    gate_text: Option<GateParams>,
    heads: Vec<HeadParams>,
}

/// Per-utterance inputs for a dialog, already embedded.
#[derive(Clone, Debug)]
pub struct DialogFeatures {
    pub dialog_id: String,
    /// One `tokens × text_dim` matrix per utterance.
    pub text: Option<Vec<Tensor>>,
    /// One `frames × 128` matrix per utterance.
    pub audio: Option<Vec<Tensor>>,
    /// Gold labels (0/1) per active task.
    pub labels: Vec<(Task, Vec<f64>)>,
    pub oov_tokens: usize,
    pub tokens: usize,
}

impl DialogFeatures {
    pub fn len(&self) -> usize {
        self.labels.first().map_or(0, |(_, l)| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_for(&self, task: Task) -> Option<&[f64]> {
        self.labels.iter().find(|(t, _)| *t == task).map(|(_, l)| l.as_slice())
    }
}

/// Embed a dialog for `config`. Only the modalities the configuration reads
/// are materialised.
pub fn featurize(config: &ModelConfig, dialog: &Dialog, embeddings: Option<&EmbeddingTable>) -> Result<DialogFeatures> {
    dialog.validate()?;
    let mut oov_tokens = 0;
    let mut tokens = 0;
    let text = if config.modality.uses_text() {
        let table = embeddings.ok_or_else(|| Error::InvalidArgument("text modality needs embeddings".into()))?;
        if table.dim() != config.text_dim {
            return Err(Error::DataMismatch(format!(
                "embeddings have dimension {}, model expects {}",
                table.dim(),
                config.text_dim
            )));
        }
        let mut mats = Vec::with_capacity(dialog.len());
        for u in &dialog.utterances {
            let e = embed_utterance(&u.tokens, table);
            oov_tokens += e.oov_count;
            tokens += u.tokens.len();
            mats.push(e.matrix);
        }
        Some(mats)
    } else {
        None
    };
    let audio = if config.modality.uses_audio() {
        let mut mats = Vec::with_capacity(dialog.len());
        for u in &dialog.utterances {
            let frames = u.acoustic_frames.as_ref().ok_or_else(|| {
                Error::DataMismatch(format!(
                    "utterance `{}` of dialog `{}` has no acoustic frames but the model reads audio",
                    u.id, dialog.dialog_id
                ))
            })?;
            mats.push(frames.clone());
        }
        Some(mats)
    } else {
        None
    };
    let labels = config
        .task_mode
        .tasks()
        .iter()
        .map(|&t| (t, dialog.utterances.iter().map(|u| u.label(t) as u8 as f64).collect()))
        .collect();
    Ok(DialogFeatures {
        dialog_id: dialog.dialog_id.clone(),
        text,
        audio,
        labels,
        oov_tokens,
        tokens,
    })
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `n × 1` probabilities per active task.
    pub probs: Vec<(Task, Var)>,
    pub attention: Option<DialogAttentionTrace>,
    /// Per-utterance hierarchical traces (text), when recorded.
    pub text_levels: Vec<LevelTrace>,
    /// Per-utterance hierarchical traces (audio frames), when recorded.
    pub audio_levels: Vec<LevelTrace>,
}

/// Materialised outputs for a dialog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogPrediction {
    pub dialog_id: String,
    pub probabilities: Vec<(Task, Vec<f64>)>,
    pub attention: Option<DialogAttentionTrace>,
    pub text_levels: Vec<LevelTrace>,
    pub audio_levels: Vec<LevelTrace>,
}

impl DialogPrediction {
    pub fn probabilities_for(&self, task: Task) -> Option<&[f64]> {
        self.probabilities.iter().find(|(t, _)| *t == task).map(|(_, p)| p.as_slice())
    }
}

impl Model {
    /// Fresh parameters for `config`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParameterSet)> {
        config.validate()?;
        let c = config;
        let h = c.hidden_dim;
        let mut ps = ParameterSet::new();
        let mut m = Model::empty(c.clone());
        if c.modality.uses_text() {
            if c.text_repr == TextRepr::Hier {
                m.text_hier = Some(HierAttnParams::init(&mut ps, "text.hier", c.text_dim, c.hier_width, rng)?);
            }
            m.text_lstm = Some(LstmParams::init(&mut ps, "text.lstm", c.text_dim, h, rng)?);
        }
        if c.modality.uses_audio() {
            match c.audio_repr {
                AudioRepr::Conv => {
                    m.audio_conv = Some(AcousticEncoderParams::init(
                        &mut ps,
                        "audio.conv",
                        MFCC_DIM,
                        c.acoustic_dim,
                        c.conv_width,
                        rng,
                    )?)
                }
                AudioRepr::Hier => {
                    m.audio_hier = Some(HierAttnParams::init(&mut ps, "audio.hier", MFCC_DIM, c.hier_width, rng)?)
                }
            }
            m.audio_lstm = Some(LstmParams::init(&mut ps, "audio.lstm", c.audio_input_dim(), h, rng)?);
        }
        if c.use_filter {
            m.gate_audio = Some(GateParams::init(&mut ps, "filter.audio", 3 * h, 2 * h, rng)?);
            m.gate_text = Some(GateParams::init(&mut ps, "filter.text", 3 * h, 2 * h, rng)?);
        }
        for &task in c.task_mode.tasks() {
            m.heads.push(HeadParams::init(&mut ps, task, c.fused_dim(), c.head_hidden, rng)?);
        }
        Ok((m, ps))
    }

    /// Bind handles to an existing set, e.g. one loaded from a checkpoint.
    /// Missing, misshapen and unexpected tensors are all errors.
    pub fn bind(config: &ModelConfig, ps: &ParameterSet) -> Result<Self> {
        config.validate()?;
        let c = config;
        let h = c.hidden_dim;
        let mut m = Model::empty(c.clone());
        if c.modality.uses_text() {
            if c.text_repr == TextRepr::Hier {
                m.text_hier = Some(HierAttnParams::from_set(ps, "text.hier", c.text_dim, c.hier_width)?);
            }
            m.text_lstm = Some(LstmParams::from_set(ps, "text.lstm", c.text_dim, h)?);
        }
        if c.modality.uses_audio() {
            match c.audio_repr {
                AudioRepr::Conv => {
                    m.audio_conv = Some(AcousticEncoderParams::from_set(
                        ps,
                        "audio.conv",
                        MFCC_DIM,
                        c.acoustic_dim,
                        c.conv_width,
                    )?)
                }
                AudioRepr::Hier => m.audio_hier = Some(HierAttnParams::from_set(ps, "audio.hier", MFCC_DIM, c.hier_width)?),
            }
            m.audio_lstm = Some(LstmParams::from_set(ps, "audio.lstm", c.audio_input_dim(), h)?);
        }
        if c.use_filter {
            m.gate_audio = Some(GateParams::from_set(ps, "filter.audio", 3 * h, 2 * h)?);
            m.gate_text = Some(GateParams::from_set(ps, "filter.text", 3 * h, 2 * h)?);
        }
        for &task in c.task_mode.tasks() {
            m.heads.push(HeadParams::from_set(ps, task, c.fused_dim(), c.head_hidden)?);
        }
        let bound: HashSet<ParamId> = m.param_ids().into_iter().collect();
        if let Some(extra) = ps.ids().find(|id| !bound.contains(id)) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` is not used by this model configuration",
                ps.name(extra)
            )));
        }
        Ok(m)
    }

    fn empty(config: ModelConfig) -> Self {
        Self {
            config,
            text_hier: None,
            text_lstm: None,
            audio_conv: None,
            audio_hier: None,
            audio_lstm: None,
            gate_audio: None,
            gate_text: None,
            heads: Vec::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    /// Every parameter handle, trunk first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(p) = &self.text_hier {
            ids.extend([p.proj, p.bias]);
        }
        for p in [&self.text_lstm, &self.audio_lstm].into_iter().flatten() {
            ids.extend([p.w_ih, p.w_hh, p.bias]);
        }
        if let Some(p) = &self.audio_conv {
            ids.extend([p.kernel, p.bias]);
        }
        if let Some(p) = &self.audio_hier {
            ids.extend([p.proj, p.bias]);
        }
        for g in [&self.gate_audio, &self.gate_text].into_iter().flatten() {
            ids.extend([g.weight, g.bias]);
        }
        for hd in &self.heads {
            ids.extend([hd.w1, hd.b1, hd.w2, hd.b2]);
        }
        ids
    }

    fn check_features(&self, f: &DialogFeatures) -> Result<usize> {
        let c = &self.config;
        let n = f.len();
        if n == 0 {
            return Err(Error::Validation {
                entity: format!("dialog `{}`", f.dialog_id),
                reason: "no utterances".into(),
            });
        }
        if c.modality.uses_text() && f.text.as_ref().map(Vec::len) != Some(n) {
            return Err(Error::DataMismatch(format!("dialog `{}` lacks text features", f.dialog_id)));
        }
        if c.modality.uses_audio() && f.audio.as_ref().map(Vec::len) != Some(n) {
            return Err(Error::DataMismatch(format!("dialog `{}` lacks acoustic frames", f.dialog_id)));
        }
        for &task in c.task_mode.tasks() {
            if f.labels_for(task).map(<[f64]>::len) != Some(n) {
                return Err(Error::DataMismatch(format!("dialog `{}` lacks {task} labels", f.dialog_id)));
            }
        }
        Ok(n)
    }

    /// Build the forward graph on `tape`. `record` keeps hierarchical level
    /// traces; the dialog attention trace is always kept when context
    /// attention runs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        f: &DialogFeatures,
        training: bool,
        record: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        self.check_features(f)?;
        let mut text_levels = Vec::new();
        let mut audio_levels = Vec::new();

        let h_text = match (&self.text_lstm, &f.text) {
            (Some(lstm), Some(mats)) => {
                let mut utts = Vec::with_capacity(mats.len());
                for m in mats {
                    let x = tape.constant(m.clone())?;
                    let u = match &self.text_hier {
                        Some(hp) => {
                            let (u, tr) = hier_attend(tape, ps, hp, x, record)?;
                            text_levels.extend(tr);
                            u
                        }
                        None => tape.mean_rows(x)?,
                    };
                    utts.push(u);
                }
                let u = tape.concat(&utts, 0)?;
                let u = tape.dropout(u, c.dropout, training, rng)?;
                Some(lstm_encode_dialog(tape, ps, lstm, u)?)
            }
            _ => None,
        };

        let h_audio = match (&self.audio_lstm, &f.audio) {
            (Some(lstm), Some(mats)) => {
                let mut utts = Vec::with_capacity(mats.len());
                for m in mats {
                    let x = tape.constant(m.clone())?;
                    let u = match (&self.audio_conv, &self.audio_hier) {
                        (Some(conv), _) => acoustic_encode(tape, ps, conv, x)?,
                        (None, Some(hp)) => {
                            let (u, tr) = hier_attend(tape, ps, hp, x, record)?;
                            audio_levels.extend(tr);
                            u
                        }
                        (None, None) => unreachable!("audio model without an utterance encoder"),
                    };
                    utts.push(u);
                }
                let u = tape.concat(&utts, 0)?;
                let u = tape.dropout(u, c.dropout, training, rng)?;
                Some(lstm_encode_dialog(tape, ps, lstm, u)?)
            }
            _ => None,
        };

        let mut attention = None;
        let fused = if c.use_context_attn {
            let ctx = contextualize_dialog(tape, h_audio, h_text, c.context_width)?;
            attention = Some(ctx.trace);
            match (c.modality, ctx.audio, ctx.text, ctx.cross) {
                (Modality::Both, Some(a), Some(t), Some(x)) => match (&self.gate_audio, &self.gate_text) {
                    (Some(ga), Some(gt)) => {
                        let fa = filter_modality(tape, ps, ga, a, x)?;
                        let ft = filter_modality(tape, ps, gt, t, x)?;
                        fuse_representation(tape, fa, ft, x)?
                    }
                    _ => fuse_representation(tape, a, t, x)?,
                },
                (Modality::Audio, Some(a), None, None) => a,
                (Modality::Text, None, Some(t), None) => t,
                _ => unreachable!("context outputs disagree with the modality"),
            }
        } else {
            match (h_audio, h_text) {
                (Some(a), Some(t)) => tape.concat(&[a, t], 1)?,
                (Some(h), None) | (None, Some(h)) => h,
                (None, None) => unreachable!("model without a modality"),
            }
        };

        let mut probs = Vec::with_capacity(self.heads.len());
        for hd in &self.heads {
            let w1 = tape.param(ps, hd.w1)?;
            let b1 = tape.param(ps, hd.b1)?;
            let w2 = tape.param(ps, hd.w2)?;
            let b2 = tape.param(ps, hd.b2)?;
            let z = tape.matmul(fused, w1)?;
            let z = tape.add_row(z, b1)?;
            let z = tape.relu(z)?;
            let z = tape.dropout(z, c.dropout, training, rng)?;
            let z = tape.matmul(z, w2)?;
            let z = tape.add_row(z, b2)?;
            probs.push((hd.task, tape.sigmoid(z)?));
        }
        Ok(ForwardPass {
            probs,
            attention,
            text_levels,
            audio_levels,
        })
    }

    /// Summed BCE over the utterances of one dialog for a single task.
    pub fn task_loss(&self, tape: &mut Tape, pass: &ForwardPass, f: &DialogFeatures, task: Task) -> Result<Var> {
        let p = pass
            .probs
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no {task} head")))?;
        let labels = f
            .labels_for(task)
            .ok_or_else(|| Error::DataMismatch(format!("dialog `{}` lacks {task} labels", f.dialog_id)))?;
        let mean = tape.bce_loss(p, labels)?;
        tape.scale(mean, labels.len() as f64)
    }

    /// Summed BCE over utterances, added across the active tasks.
    pub fn loss_sum(&self, tape: &mut Tape, pass: &ForwardPass, f: &DialogFeatures) -> Result<Var> {
        let mut total: Option<Var> = None;
        for hd in &self.heads {
            let l = self.task_loss(tape, pass, f, hd.task)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("model has no heads".into()))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, ps: &ParameterSet, f: &DialogFeatures, record: bool) -> Result<DialogPrediction> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.run(ps, f, false, record, &mut rng)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        ps: &ParameterSet,
        f: &DialogFeatures,
        training: bool,
        record: bool,
        rng: &mut R,
    ) -> Result<DialogPrediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, ps, f, training, record, rng)?;
        Ok(DialogPrediction {
            dialog_id: f.dialog_id.clone(),
            probabilities: pass.probs.iter().map(|&(t, v)| (t, tape.data(v).to_vec())).collect(),
            attention: pass.attention,
            text_levels: pass.text_levels,
            audio_levels: pass.audio_levels,
        })
    }
}

/// One-shot forward pass of `dialog` with hierarchical traces recorded.
pub fn forward_dialog<R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &ParameterSet,
    dialog: &Dialog,
    embeddings: Option<&EmbeddingTable>,
    training: bool,
    rng: &mut R,
) -> Result<DialogPrediction> {
    let model = Model::bind(config, params)?;
    let f = featurize(config, dialog, embeddings)?;
    model.run(params, &f, training, true, rng)
}
