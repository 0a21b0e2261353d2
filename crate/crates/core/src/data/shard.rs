//! Packed token shards.
//!
//! A shard file is a 48-byte little-endian header followed by the token
//! payload and the document-start index:
//!
//! ```text
//! magic "MULABTOK" | version u32 | vocab u32 | context_len u32 | reserved u32
//! record_count u64 | token_count u64 | boundary_count u64
//! tokens: u16 × token_count
//! boundaries: u64 × boundary_count   (shard-relative token offsets)
//! ```
//!
//! Records are `context_len + 1` consecutive tokens. A `manifest.toml` next
//! to the shards lists them with their payload checksums.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenStream;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MULABTOK";
pub const SHARD_VERSION: u32 = 1;
const HEADER_BYTES: usize = 48;
const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub records: u64,
    pub tokens: u64,
    pub boundaries: u64,
    /// SHA-256 of the token payload bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub vocab_size: u32,
    pub context_len: u32,
    pub total_records: u64,
    pub dropped_tokens: u64,
    pub shards: Vec<ShardEntry>,
}

impl ShardManifest {
    pub fn record_len(&self) -> usize {
        self.context_len as usize + 1
    }
}

fn payload_bytes(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

/// Packs `stream` into `(C+1)`-token records, drops the remainder, and
/// writes shards of at most `records_per_shard` records plus a manifest.
pub fn write_shards(
    stream: &TokenStream,
    context_len: usize,
    dir: &Path,
    records_per_shard: usize,
) -> Result<ShardManifest> {
    let v = stream.vocab_size;
    if v == 0 || v > 65_536 {
        return Err(Error::InvalidData(format!("vocabulary {v} does not fit 16-bit ids")));
    }
    if context_len == 0 || records_per_shard == 0 {
        return Err(Error::InvalidData(
            "context length and records per shard must be positive".into(),
        ));
    }
    if let Some(bad) = stream.tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidData(format!("token {bad} outside vocabulary {v}")));
    }
    let rec = context_len + 1;
    let n_records = stream.tokens.len() / rec;
    if n_records == 0 {
        return Err(Error::InvalidData(format!(
            "{} tokens cannot fill one record of {rec}",
            stream.tokens.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shards = Vec::new();
    for (index, first) in (0..n_records).step_by(records_per_shard).enumerate() {
        let records = records_per_shard.min(n_records - first);
        let (lo, hi) = (first * rec, (first + records) * rec);
        let tokens = &stream.tokens[lo..hi];
        let boundaries: Vec<u64> = stream
            .doc_starts
            .iter()
            .filter(|&&s| s >= lo as u64 && s < hi as u64)
            .map(|&s| s - lo as u64)
            .collect();
        let payload = payload_bytes(tokens);
        let mut bytes = Vec::with_capacity(HEADER_BYTES + payload.len() + 8 * boundaries.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
        bytes.extend_from_slice(&(context_len as u32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&(records as u64).to_le_bytes());
        bytes.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(boundaries.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&payload);
        for b in &boundaries {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        let file = format!("shard-{index:05}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        shards.push(ShardEntry {
            file,
            records: records as u64,
            tokens: tokens.len() as u64,
            boundaries: boundaries.len() as u64,
            sha256: hex::encode(Sha256::digest(&payload)),
        });
    }
    let manifest = ShardManifest {
        version: SHARD_VERSION,
        vocab_size: v as u32,
        context_len: context_len as u32,
        total_records: n_records as u64,
        dropped_tokens: (stream.tokens.len() - n_records * rec) as u64,
        shards,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// All shards of a directory, loaded and verified.
#[derive(Clone, Debug)]
pub struct ShardSet {
    dir: PathBuf,
    manifest: ShardManifest,
    tokens: Vec<u16>,
    /// Sorted global offsets of document starts.
    doc_starts: Vec<u64>,
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

impl ShardSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ShardManifest =
            toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.version != SHARD_VERSION {
            return Err(Error::format(
                &mpath,
                format!("unsupported shard version {}", manifest.version),
            ));
        }
        let rec = manifest.record_len() as u64;
        let mut tokens = Vec::new();
        let mut doc_starts = Vec::new();
        for entry in &manifest.shards {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let bad = |m: String| Error::format(&path, m);
            if bytes.len() < HEADER_BYTES || &bytes[..8] != MAGIC {
                return Err(bad("not a token shard".into()));
            }
            let (version, vocab, ctx) = (read_u32(&bytes, 8), read_u32(&bytes, 12), read_u32(&bytes, 16));
            let (records, count, nb) = (read_u64(&bytes, 24), read_u64(&bytes, 32), read_u64(&bytes, 40));
            if version != SHARD_VERSION
                || vocab != manifest.vocab_size
                || ctx != manifest.context_len
                || records != entry.records
                || count != entry.tokens
                || nb != entry.boundaries
                || count != records * rec
            {
                return Err(bad("header disagrees with manifest".into()));
            }
            let payload_end = HEADER_BYTES + 2 * count as usize;
            if bytes.len() != payload_end + 8 * nb as usize {
                return Err(bad(format!("unexpected file length {}", bytes.len())));
            }
            let payload = &bytes[HEADER_BYTES..payload_end];
            if hex::encode(Sha256::digest(payload)) != entry.sha256 {
                return Err(bad("payload checksum mismatch".into()));
            }
            let base = tokens.len() as u64;
            tokens.extend(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])));
            if let Some(t) = tokens[base as usize..].iter().find(|&&t| t as u32 >= vocab) {
                return Err(bad(format!("token {t} outside vocabulary {vocab}")));
            }
            for i in 0..nb as usize {
                doc_starts.push(base + read_u64(&bytes, payload_end + 8 * i));
            }
        }
        if tokens.len() as u64 != manifest.total_records * rec {
            return Err(Error::format(&mpath, "record count disagrees with shards"));
        }
        Ok(ShardSet {
            dir: dir.to_path_buf(),
            manifest,
            tokens,
            doc_starts,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    pub fn vocab_size(&self) -> usize {
        self.manifest.vocab_size as usize
    }

    pub fn context_len(&self) -> usize {
        self.manifest.context_len as usize
    }

    pub fn num_records(&self) -> usize {
        self.manifest.total_records as usize
    }

    /// The `C+1` tokens of record `k`.
    pub fn record(&self, k: usize) -> &[u16] {
        let rec = self.manifest.record_len();
        &self.tokens[k * rec..(k + 1) * rec]
    }

    /// `valid[j]` is false when token `j+1` of record `k` starts a new
    /// document, so it is not predictable from the preceding tokens.
    pub fn target_mask(&self, k: usize) -> Vec<bool> {
        let rec = self.manifest.record_len() as u64;
        let lo = k as u64 * rec;
        let mut valid = vec![true; rec as usize - 1];
        let from = self.doc_starts.partition_point(|&s| s <= lo);
        for &s in &self.doc_starts[from..] {
            if s >= lo + rec {
                break;
            }
            valid[(s - lo - 1) as usize] = false;
        }
        valid
    }

    /// The packed stream, all records back to back.
    pub fn packed_tokens(&self) -> &[u16] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, tokenize_bytes};

    #[test]
    fn packing_drops_the_remainder() {
        let dir = tempfile::tempdir().unwrap();
        let stream = synth_corpus(0, 1000, 64).unwrap();
        let m = write_shards(&stream, 256, dir.path(), 2).unwrap();
        assert_eq!(m.total_records, 3);
        assert_eq!(m.dropped_tokens, 229);
        assert_eq!(m.shards.len(), 2);
        let set = ShardSet::open(dir.path()).unwrap();
        assert_eq!(set.packed_tokens(), &stream.tokens[..3 * 257]);
        for k in 0..3 {
            assert_eq!(set.record(k), &stream.tokens[k * 257..(k + 1) * 257]);
        }
    }

    #[test]
    fn checksum_tracks_payload() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut stream = synth_corpus(0, 600, 64).unwrap();
        let ma = write_shards(&stream, 9, a.path(), 1000).unwrap();
        let same = write_shards(&stream, 9, b.path(), 1000).unwrap();
        assert_eq!(ma.shards[0].sha256, same.shards[0].sha256);
        stream.tokens[3] = (stream.tokens[3] + 1) % 64;
        let mb = write_shards(&stream, 9, b.path(), 1000).unwrap();
        assert_ne!(ma.shards[0].sha256, mb.shards[0].sha256);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let stream = synth_corpus(0, 600, 64).unwrap();
        let m = write_shards(&stream, 9, dir.path(), 1000).unwrap();
        let path = dir.path().join(&m.shards[0].file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_BYTES + 1] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(ShardSet::open(dir.path()).is_err());
    }

    #[test]
    fn rejects_short_streams_and_bad_ids() {
        let dir = tempfile::tempdir().unwrap();
        let stream = synth_corpus(0, 8, 8).unwrap();
        assert!(write_shards(&stream, 8, dir.path(), 10).is_err());
        let mut bad = synth_corpus(0, 100, 8).unwrap();
        bad.tokens[0] = 8;
        assert!(write_shards(&bad, 4, dir.path(), 10).is_err());
    }

    #[test]
    fn document_starts_mask_targets() {
        let dir = tempfile::tempdir().unwrap();
        // records of 4 tokens: "ab|c" "d|ef" "gh|i"
        let stream = tokenize_bytes(b"ab|cd|efgh|i", Some(b'|'));
        assert_eq!(stream.doc_starts, [3, 6, 11]);
        write_shards(&stream, 3, dir.path(), 2).unwrap();
        let set = ShardSet::open(dir.path()).unwrap();
        assert_eq!(set.target_mask(0), [true, true, false]);
        assert_eq!(set.target_mask(1), [true, false, true]);
        assert_eq!(set.target_mask(2), [true, true, false]);
    }
}
