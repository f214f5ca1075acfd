//! Constructed corpora whose labels are a known function of the tokens:
//! an utterance is sarcastic iff it contains [`SARCASM_MARKER`] and humorous
//! iff it contains [`HUMOR_MARKER`].

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{write_corpus, Dialog, EmbeddingTable, UtteranceRecord, MFCC_DIM};
use crate::error::Result;
use crate::model::Task;

pub const SARCASM_MARKER: &str = "zz_sarc";
pub const HUMOR_MARKER: &str = "zz_hum";

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerCorpusSpec {
    pub dialogs: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for MarkerCorpusSpec {
    fn default() -> Self {
        Self {
            dialogs: 8,
            min_utterances: 3,
            max_utterances: 7,
            min_tokens: 2,
            max_tokens: 6,
            vocab: 40,
            embed_dim: 16,
            frames: 4,
            seed: 0,
        }
    }
}

fn filler(i: usize) -> String {
    format!("w{i:03}")
}

/// Dialogs plus an embedding table covering every token.
pub fn marker_corpus(spec: &MarkerCorpusSpec) -> (Vec<Dialog>, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = EmbeddingTable::new(spec.embed_dim);
    let words: Vec<String> = (0..spec.vocab).map(filler).chain([SARCASM_MARKER.into(), HUMOR_MARKER.into()]).collect();
    for w in &words {
        let v = (0..spec.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        table.insert(w.clone(), v).expect("fixed dimension");
    }
    let mut dialogs = Vec::with_capacity(spec.dialogs);
    for d in 0..spec.dialogs {
        let n = rng.gen_range(spec.min_utterances..=spec.max_utterances);
        let mut utterances = Vec::with_capacity(n);
        for u in 0..n {
            let sarcasm = rng.gen_bool(0.5);
            let humor = rng.gen_bool(0.5);
            let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
            let mut tokens: Vec<String> = (0..len).map(|_| filler(rng.gen_range(0..spec.vocab))).collect();
            if sarcasm {
                tokens.push(SARCASM_MARKER.into());
            }
            if humor {
                tokens.push(HUMOR_MARKER.into());
            }
            tokens.shuffle(&mut rng);
            let frames = Tensor::matrix(
                spec.frames,
                MFCC_DIM,
                (0..spec.frames * MFCC_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .expect("frame shape");
            utterances.push(UtteranceRecord {
                id: format!("d{d}_u{u}"),
                speaker: format!("spk{}", u % 3),
                tokens,
                acoustic_frames: Some(frames),
                sarcasm,
                humor,
            });
        }
        dialogs.push(Dialog {
            dialog_id: format!("d{d}"),
            utterances,
        });
    }
    (dialogs, table)
}

/// Write the corpus and embeddings into `dir`; returns their paths.
pub fn write_marker_fixture(dir: impl AsRef<Path>, spec: &MarkerCorpusSpec) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (dialogs, table) = marker_corpus(spec);
    let corpus = dir.join("corpus.jsonl");
    let emb = dir.join("embeddings.txt");
    write_corpus(&corpus, &dialogs)?;
    table.save(&emb)?;
    Ok((corpus, emb))
}

/// Training accuracy of a perceptron over token-presence features. Reaching
/// 1.0 shows the labels are linearly separable in that representation.
pub fn linear_probe_accuracy(dialogs: &[Dialog], task: Task, epochs: usize) -> f64 {
    let mut vocab: Vec<&str> = dialogs
        .iter()
        .flat_map(|d| d.utterances.iter().flat_map(|u| u.tokens.iter().map(String::as_str)))
        .collect();
    vocab.sort_unstable();
    vocab.dedup();
    let examples: Vec<(Vec<usize>, f64)> = dialogs
        .iter()
        .flat_map(|d| &d.utterances)
        .map(|u| {
            let mut idx: Vec<usize> = u.tokens.iter().map(|t| vocab.binary_search(&t.as_str()).unwrap()).collect();
            idx.sort_unstable();
            idx.dedup();
            (idx, if u.label(task) { 1.0 } else { -1.0 })
        })
        .collect();
    let mut w = vec![0.0; vocab.len()];
    let mut b = 0.0;
    let score = |w: &[f64], b: f64, x: &[usize]| x.iter().map(|&i| w[i]).sum::<f64>() + b;
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, y) in &examples {
            if y * score(&w, b, x) <= 0.0 {
                mistakes += 1;
                for &i in x {
                    w[i] += y;
                }
                b += y;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let correct = examples.iter().filter(|(x, y)| y * score(&w, b, x) > 0.0).count();
    correct as f64 / examples.len().max(1) as f64
}
