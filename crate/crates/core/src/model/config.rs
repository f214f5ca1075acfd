use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::MFCC_DIM;
use crate::error::{Error, Result};
use crate::{context_attn, hier_attn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sarcasm,
    Humor,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sarcasm => "sarcasm",
            Task::Humor => "humor",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Sarcasm,
    Humor,
    Joint,
}

impl TaskMode {
    pub fn tasks(self) -> &'static [Task] {
        match self {
            TaskMode::Sarcasm => &[Task::Sarcasm],
            TaskMode::Humor => &[Task::Humor],
            TaskMode::Joint => &[Task::Sarcasm, Task::Humor],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sarcasm" => Ok(TaskMode::Sarcasm),
            "humor" | "humour" => Ok(TaskMode::Humor),
            "joint" => Ok(TaskMode::Joint),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}` (sarcasm|humor|joint)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskMode::Sarcasm => "sarcasm",
            TaskMode::Humor => "humor",
            TaskMode::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Both,
}

impl Modality {
    pub fn uses_text(self) -> bool {
        matches!(self, Modality::Text | Modality::Both)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Modality::Audio | Modality::Both)
    }
}

/// Utterance text vector: mean of word vectors, or hierarchical attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextRepr {
    Mean,
    Hier,
}

/// Utterance audio vector: convolutional encoder, or hierarchical attention
/// over frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioRepr {
    Conv,
    Hier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub text_repr: TextRepr,
    pub audio_repr: AudioRepr,
    pub use_context_attn: bool,
    pub use_filter: bool,
    pub task_mode: TaskMode,
    /// Word-vector dimension.
    pub text_dim: usize,
    /// LSTM hidden size.
    pub hidden_dim: usize,
    /// Output channels of the convolutional frame encoder.
    pub acoustic_dim: usize,
    pub conv_width: usize,
    /// Local window width of the hierarchical attention.
    pub hier_width: usize,
    /// Context window width of the dialog-level attention.
    pub context_width: usize,
    pub dropout: f64,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    /// The full text+audio model.
    fn default() -> Self {
        Self {
            modality: Modality::Both,
            text_repr: TextRepr::Hier,
            audio_repr: AudioRepr::Conv,
            use_context_attn: true,
            use_filter: true,
            task_mode: TaskMode::Sarcasm,
            text_dim: 300,
            hidden_dim: 128,
            acoustic_dim: 128,
            conv_width: 3,
            hier_width: hier_attn::DEFAULT_WIDTH,
            context_width: context_attn::DEFAULT_WIDTH,
            dropout: 0.4,
            head_hidden: 128,
        }
    }
}

/// Ablation grid: `(row label, modality, text, audio, context, filter)`.
const VARIANTS: &[(&str, Modality, TextRepr, AudioRepr, bool, bool)] = &[
    ("LSTM(A)", Modality::Audio, TextRepr::Hier, AudioRepr::Conv, false, false),
    ("LSTM(H-ATN^A)", Modality::Audio, TextRepr::Hier, AudioRepr::Hier, false, false),
    ("LSTM(A)+C-ATN^D", Modality::Audio, TextRepr::Hier, AudioRepr::Conv, true, false),
    ("LSTM(H-ATN^A)+C-ATN^D", Modality::Audio, TextRepr::Hier, AudioRepr::Hier, true, false),
    ("LSTM(T_avg)", Modality::Text, TextRepr::Mean, AudioRepr::Conv, false, false),
    ("LSTM(H-ATN^U)", Modality::Text, TextRepr::Hier, AudioRepr::Conv, false, false),
    ("LSTM(H-ATN^U)+C-ATN^D", Modality::Text, TextRepr::Hier, AudioRepr::Conv, true, false),
    ("LSTM(A)+LSTM(T_avg)", Modality::Both, TextRepr::Mean, AudioRepr::Conv, false, false),
    ("LSTM(A)+LSTM(H-ATN^U)", Modality::Both, TextRepr::Hier, AudioRepr::Conv, false, false),
    ("LSTM(A)+LSTM(H-ATN^U)+C-ATN^D", Modality::Both, TextRepr::Hier, AudioRepr::Conv, true, false),
    ("LSTM(A)+LSTM(H-ATN^U)+C-ATN^D+Filter", Modality::Both, TextRepr::Hier, AudioRepr::Conv, true, true),
];

pub const FULL_VARIANT: &str = "LSTM(A)+LSTM(H-ATN^U)+C-ATN^D+Filter";

/// Every accepted variant label.
pub fn variant_names() -> impl Iterator<Item = &'static str> {
    VARIANTS.iter().map(|v| v.0)
}

/// Configuration for an ablation row label (whitespace-insensitive), or
/// `"full"` for the complete model. Dimensions take their defaults and the
/// task mode is single-task sarcasm.
pub fn build_variant(name: &str) -> Result<ModelConfig> {
    let key: String = name.chars().filter(|c| !c.is_whitespace()).collect();
    let key = if key.eq_ignore_ascii_case("full") { FULL_VARIANT.to_string() } else { key };
    let &(_, modality, text_repr, audio_repr, ctx, filter) = VARIANTS
        .iter()
        .find(|v| v.0 == key)
        .ok_or_else(|| Error::UnknownVariant(name.to_string()))?;
    Ok(ModelConfig {
        modality,
        text_repr,
        audio_repr,
        use_context_attn: ctx,
        use_filter: filter,
        ..ModelConfig::default()
    })
}

impl ModelConfig {
    pub fn with_task(mut self, task_mode: TaskMode) -> Self {
        self.task_mode = task_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.use_filter && !(self.use_context_attn && self.modality == Modality::Both) {
            return bad("the filter needs context attention and both modalities".into());
        }
        if self.hier_width < 2 {
            return bad(format!("hierarchical attention width {} must be ≥ 2", self.hier_width));
        }
        if self.context_width < 1 {
            return bad("context width must be ≥ 1".into());
        }
        if self.conv_width.is_multiple_of(2) {
            return bad(format!("convolution width {} must be odd", self.conv_width));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if [self.text_dim, self.hidden_dim, self.acoustic_dim, self.head_hidden].contains(&0) {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }

    /// Ablation row label, when this configuration is one of the grid rows.
    /// Dimensions and the task mode are ignored.
    pub fn variant_name(&self) -> Option<&'static str> {
        VARIANTS
            .iter()
            .find(|&&(_, m, t, a, c, f)| {
                m == self.modality
                    && (!m.uses_text() || t == self.text_repr)
                    && (!m.uses_audio() || a == self.audio_repr)
                    && c == self.use_context_attn
                    && f == self.use_filter
            })
            .map(|v| v.0)
    }

    /// Width of the per-utterance audio vector fed to the audio LSTM.
    pub fn audio_input_dim(&self) -> usize {
        match self.audio_repr {
            AudioRepr::Conv => self.acoustic_dim,
            AudioRepr::Hier => MFCC_DIM,
        }
    }

    /// Width of the representation entering the task heads.
    pub fn fused_dim(&self) -> usize {
        let h = self.hidden_dim;
        match (self.modality, self.use_context_attn) {
            (Modality::Both, true) => 7 * h,
            (Modality::Both, false) => 2 * h,
            (_, true) => 2 * h,
            (_, false) => h,
        }
    }
}
