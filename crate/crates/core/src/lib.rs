//! Multimodal conversational sarcasm and humor classification.
//!
//! The model reads a dialog of utterances, each with tokens and optionally
//! MFCC frames, and scores every utterance for sarcasm and humor. Text goes
//! through a hierarchical local attention over word vectors, audio through a
//! convolutional frame encoder; per-modality LSTMs run over the dialog, a
//! windowed contextual attention mixes in preceding utterances within and
//! across modalities, and a sigmoid gate filters each modality before the
//! task heads.
//!
//! Everything runs on a small reverse-mode tape in [`autodiff`], so every
//! parameter gradient can be checked against finite differences.

pub mod autodiff;
pub mod context_attn;
pub mod data;
pub mod encoders;
mod error;
pub mod eval;
pub mod filter;
pub mod hier_attn;
pub mod model;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
