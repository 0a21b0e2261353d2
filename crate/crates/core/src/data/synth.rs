//! Synthetic order-2 Markov corpus.
//!
//! Each context `(a, b)` owns a small successor table: a few tokens drawn
//! from a Zipf law over a seeded permutation of the vocabulary, with random
//! weights. The Zipf skew keeps the unigram entropy well below `ln V`, and
//! the sparse tables give a conditional entropy far below that, so models
//! have both something to learn and a nonzero floor.

use std::collections::HashMap;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::TokenStream;
use crate::error::{Error, Result};

const SUCCESSORS: usize = 4;
const ZIPF_EXPONENT: f64 = 1.1;

struct Successors {
    tokens: [u16; SUCCESSORS],
    weights: WeightedIndex<f64>,
}

fn mix(seed: u64, a: u16, b: u16) -> u64 {
    // splitmix64 finalizer over the packed key
    let mut z = seed ^ ((a as u64) << 32 | (b as u64) << 8 | 0x5bd1_e995);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n_tokens` ids from the order-2 source identified by `(seed, vocab_size)`.
pub fn synth_corpus(seed: u64, n_tokens: usize, vocab_size: usize) -> Result<TokenStream> {
    if !(8..=65_536).contains(&vocab_size) {
        return Err(Error::InvalidData(format!(
            "synthetic vocabulary must be in 8..=65536, got {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks: Vec<u16> = (0..vocab_size).map(|t| t as u16).collect();
    ranks.shuffle(&mut rng);
    let zipf = Zipf::new(vocab_size as u64, ZIPF_EXPONENT).expect("valid zipf parameters");

    let mut tables: HashMap<(u16, u16), Successors> = HashMap::new();
    let mut tokens = Vec::with_capacity(n_tokens);
    let (mut a, mut b) = (ranks[0], ranks[1 % vocab_size]);
    for _ in 0..n_tokens {
        let entry = tables.entry((a, b)).or_insert_with(|| {
            let mut local = ChaCha8Rng::seed_from_u64(mix(seed, a, b));
            let mut toks = [0u16; SUCCESSORS];
            for t in toks.iter_mut() {
                let rank = zipf.sample(&mut local) as usize - 1;
                *t = ranks[rank.min(vocab_size - 1)];
            }
            let w: Vec<f64> = (0..SUCCESSORS).map(|_| local.gen_range(0.05..1.0)).collect();
            Successors {
                tokens: toks,
                weights: WeightedIndex::new(w).expect("positive weights"),
            }
        });
        let next = entry.tokens[entry.weights.sample(&mut rng)];
        tokens.push(next);
        a = b;
        b = next;
    }
    Ok(TokenStream {
        vocab_size,
        tokens,
        doc_starts: Vec::new(),
    })
}

/// Empirical unigram entropy in nats.
pub fn unigram_entropy(tokens: &[u16]) -> f64 {
    let mut counts: HashMap<u16, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
