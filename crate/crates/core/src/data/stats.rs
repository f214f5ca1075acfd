use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Dialog;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub utterances: usize,
    pub sarcastic: usize,
    pub humorous: usize,
    pub max_utterance_len: usize,
    pub avg_utterance_len: f64,
    pub vocabulary: usize,
}

pub fn corpus_stats(dialogs: &[Dialog]) -> Result<CorpusStats> {
    if dialogs.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let mut vocab = HashSet::new();
    let mut s = CorpusStats {
        dialogs: dialogs.len(),
        utterances: 0,
        sarcastic: 0,
        humorous: 0,
        max_utterance_len: 0,
        avg_utterance_len: 0.0,
        vocabulary: 0,
    };
    let mut tokens = 0usize;
    for u in dialogs.iter().flat_map(|d| &d.utterances) {
        s.utterances += 1;
        s.sarcastic += u.sarcasm as usize;
        s.humorous += u.humor as usize;
        s.max_utterance_len = s.max_utterance_len.max(u.tokens.len());
        tokens += u.tokens.len();
        vocab.extend(u.tokens.iter().map(String::as_str));
    }
    s.avg_utterance_len = tokens as f64 / s.utterances.max(1) as f64;
    s.vocabulary = vocab.len();
    Ok(s)
}

/// Dialog-level split; `round(fraction · n)` dialogs go to validation.
/// Both parts keep the input order.
pub fn split_train_val(dialogs: &[Dialog], fraction: f64, seed: u64) -> Result<(Vec<Dialog>, Vec<Dialog>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = dialogs.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidArgument(format!(
            "{n} dialogs cannot be split {:.0}/{:.0} with both sides non-empty",
            (1.0 - fraction) * 100.0,
            fraction * 100.0
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: HashSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (i, d) in dialogs.iter().enumerate() {
        if val_set.contains(&i) {
            val.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, val))
}
