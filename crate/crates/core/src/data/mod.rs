//! Corpus and word-vector loading.

mod corpus;
mod embedding;
mod stats;

pub use corpus::{load_corpus, read_mfcc_csv, write_corpus, Dialog, UtteranceRecord, MFCC_DIM};
pub use embedding::{embed_utterance, load_embeddings, EmbeddedUtterance, EmbeddingTable};
pub use stats::{corpus_stats, split_train_val, CorpusStats};
