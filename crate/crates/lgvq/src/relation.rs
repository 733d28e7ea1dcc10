//! Relationship alignment: match caption words to their most similar code
//! tokens, then make matched code pairs mirror the cosine-similarity
//! structure of the word pairs.
//!
//! Matching happens in text space against the code-transformer output
//! (global row excluded) and is detached from gradients; the loss compares
//! similarities in code space on the quantized embeddings, so only codebook
//! entries are pushed.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::align::cosine;
use crate::tensor::{Tape, TensorId};
use crate::text::{word_positions, Vocabulary, RESERVED};

static STOP_WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS
        .get_or_init(|| {
            include_str!("../resources/stopwords.txt")
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect()
        })
        .contains(word)
}

/// Positions of content words: inside the marker frame, in the vocabulary
/// (unknown words have no usable embedding), and not stop words.
pub fn content_positions(tokens: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    word_positions(tokens)
        .into_iter()
        .filter(|&p| tokens[p] >= RESERVED && !is_stop_word(vocab.token(tokens[p])))
        .collect()
}

/// All unordered pairs of the given positions, subsampled to `cap` when the
/// full set is larger. Pair order (and the subsample) is deterministic for a
/// given generator state.
pub fn select_word_pairs(
    rng: &mut ChaCha12Rng,
    positions: &[usize],
    cap: usize,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            pairs.push((positions[i], positions[j]));
        }
    }
    if pairs.len() > cap {
        // partial Fisher-Yates over the pair list
        let m = pairs.len();
        for i in 0..cap {
            let j = rng.gen_range(i..m);
            pairs.swap(i, j);
        }
        pairs.truncate(cap);
        pairs.sort_unstable();
    }
    pairs
}

/// Position of the code whose text-space embedding (the flat `[L, d_t]`
/// per-code lift, one row per grid position, no mixing between positions) is
/// most cosine-similar to the word vector. Ties break to the lowest
/// position.
pub fn match_word_to_code(word_vec: &[f64], code_lift_values: &[f64], d_t: usize) -> usize {
    assert_eq!(code_lift_values.len() % d_t, 0);
    let rows = code_lift_values.len() / d_t;
    assert!(rows >= 1, "need at least one code row");
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for j in 0..rows {
        let row = &code_lift_values[j * d_t..(j + 1) * d_t];
        let sim = cosine(word_vec, row);
        if sim > best_sim {
            best_sim = sim;
            best = j;
        }
    }
    best
}

/// One caption's relationship pairs, resolved to code positions.
pub struct ResolvedPair {
    pub code_a: usize,
    pub code_b: usize,
    /// Frozen cosine similarity of the two word embeddings.
    pub word_sim: f64,
}

/// Sum over pairs of (word similarity − code similarity)²  on the quantized
/// code embeddings `code_rows` (`[L, d_z]`). Zero for an empty pair set.
pub fn ras_loss(t: &mut Tape, code_rows: TensorId, pairs: &[ResolvedPair]) -> TensorId {
    if pairs.is_empty() {
        return t.scalar(0.0);
    }
    let idx_a: Vec<usize> = pairs.iter().map(|p| p.code_a).collect();
    let idx_b: Vec<usize> = pairs.iter().map(|p| p.code_b).collect();
    let a = t.rows(code_rows, &idx_a);
    let b = t.rows(code_rows, &idx_b);
    let na = t.normalize_rows(a);
    let nb = t.normalize_rows(b);
    let code_sims = t.rowwise_dot(na, nb);
    let word_sims = t.constant(&[pairs.len()], pairs.iter().map(|p| p.word_sim).collect());
    let gap = t.sub(word_sims, code_sims);
    let sq = t.mul(gap, gap);
    t.sum_all(sq)
}
