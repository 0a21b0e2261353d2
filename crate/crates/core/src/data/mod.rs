//! Token corpora, packed shards and stateless batch serving.

mod batch;
mod shard;
mod synth;

pub use batch::{BatchSpec, RecordBatch, TRAIN_NUMERATOR, TRAIN_DENOMINATOR};
pub use shard::{write_shards, ShardEntry, ShardManifest, ShardSet, MAGIC, SHARD_VERSION};
pub use synth::{synth_corpus, unigram_entropy};

use serde::{Deserialize, Serialize};

/// A flat token stream with document start offsets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub vocab_size: usize,
    pub tokens: Vec<u16>,
    /// Sorted offsets of tokens that begin a new document (offset 0 is implied).
    pub doc_starts: Vec<u64>,
}

/// Byte-level tokens (`V = 256`). When `delimiter` is set, the token after
/// each delimiter byte starts a new document; the delimiter itself stays in
/// the stream.
pub fn tokenize_bytes(raw: &[u8], delimiter: Option<u8>) -> TokenStream {
    let tokens: Vec<u16> = raw.iter().map(|&b| b as u16).collect();
    let doc_starts = match delimiter {
        Some(d) => raw
            .iter()
            .enumerate()
            .filter(|&(i, &b)| b == d && i + 1 < raw.len())
            .map(|(i, _)| i as u64 + 1)
            .collect(),
        None => Vec::new(),
    };
    TokenStream {
        vocab_size: 256,
        tokens,
        doc_starts,
    }
}

/// Inverse of [`tokenize_bytes`]; ids above 255 are rejected.
pub fn detokenize_bytes(tokens: &[u16]) -> Option<Vec<u8>> {
    tokens.iter().map(|&t| u8::try_from(t).ok()).collect()
}
