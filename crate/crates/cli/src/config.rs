//! Flat `key = value` run configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mshc_core::model::{build_variant, ModelConfig, TaskMode};
use mshc_core::train::TrainConfig;

use crate::error::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("corpus", "", "training corpus (JSON lines)"),
    ("test_corpus", "", "held-out corpus scored after training; the validation split is used when empty"),
    ("embeddings", "", "word vectors, `<count> <dim>` text format; required for text variants"),
    ("out_dir", "", "output directory"),
    ("variant", "full", "ablation row label, e.g. LSTM(A)+C-ATN^D"),
    ("task", "sarcasm", "sarcasm | humor | joint"),
    ("seed", "0", "seed for initialisation, shuffling, dropout and the split"),
    ("val_fraction", "0.1", "fraction of training dialogs held out for early stopping"),
    ("text_dim", "300", "word-vector dimension"),
    ("hidden_dim", "128", "LSTM hidden size"),
    ("acoustic_dim", "128", "convolutional frame encoder channels"),
    ("conv_width", "3", "convolution kernel width (odd)"),
    ("hier_width", "3", "local window of the hierarchical attention"),
    ("context_width", "5", "dialog context window"),
    ("dropout", "0.4", "dropout rate"),
    ("head_hidden", "128", "task head hidden size"),
    ("lr", "0.001", "Adam learning rate"),
    ("batch_size", "32", "dialogs per batch"),
    ("max_epochs", "100", "epoch limit"),
    ("patience", "10", "early-stopping patience in epochs"),
    ("grad_clip", "5", "global gradient-norm ceiling"),
    ("threshold", "0.5", "decision threshold"),
    ("stop_at_f1", "", "stop once validation F1 reaches this value"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub variant: String,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct RunConfigFile {
    values: BTreeMap<String, String>,
    base: Option<PathBuf>,
    /// Path keys given on the command line, resolved against the working
    /// directory instead of the config file's.
    cli_paths: BTreeSet<String>,
}

impl RunConfigFile {
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let k = k.trim();
            if !KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(CliError::config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self {
            values,
            base: base.map(Path::to_path_buf),
            cli_paths: BTreeSet::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Flag values win over file values.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| {
            let p = PathBuf::from(v);
            match &self.base {
                Some(b) if p.is_relative() && !self.cli_paths.contains(key) => b.join(p),
                _ => p,
            }
        })
    }

    pub fn set_path_flag(&mut self, key: &str, value: &Path) {
        self.set(key, value.to_string_lossy());
        self.cli_paths.insert(key.to_string());
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::config(format!("key `{key}`: cannot parse `{v}`: {e}"))))
            .transpose()
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let variant = self.get("variant").unwrap_or("full").to_string();
        let mut model = build_variant(&variant).map_err(|e| CliError::config(format!("key `variant`: {e}")))?;
        model.task_mode =
            TaskMode::parse(self.get("task").unwrap_or("sarcasm")).map_err(|e| CliError::config(format!("key `task`: {e}")))?;
        macro_rules! apply {
            ($target:expr, $($key:literal => $field:ident),* $(,)?) => {
                $( if let Some(v) = self.num($key)? { $target.$field = v; } )*
            };
        }
        apply!(model,
            "text_dim" => text_dim, "hidden_dim" => hidden_dim, "acoustic_dim" => acoustic_dim,
            "conv_width" => conv_width, "hier_width" => hier_width, "context_width" => context_width,
            "dropout" => dropout, "head_hidden" => head_hidden,
        );
        let mut train = TrainConfig::default();
        apply!(train,
            "lr" => lr, "batch_size" => batch_size, "max_epochs" => max_epochs, "patience" => patience,
            "grad_clip" => grad_clip, "threshold" => threshold, "seed" => seed,
        );
        train.stop_at_f1 = self.num("stop_at_f1")?;
        model.validate().map_err(|e| CliError::config(e.to_string()))?;
        train.validate().map_err(|e| CliError::config(e.to_string()))?;
        let val_fraction = self.num("val_fraction")?.unwrap_or(0.1);
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(CliError::config(format!("key `val_fraction`: {val_fraction} outside (0, 1)")));
        }
        Ok(RunConfig {
            corpus: self.path("corpus"),
            test_corpus: self.path("test_corpus"),
            embeddings: self.path("embeddings"),
            out_dir: self.path("out_dir"),
            variant,
            val_fraction,
            model,
            train,
        })
    }
}
