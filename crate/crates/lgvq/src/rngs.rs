//! Seed-derived random streams.
//!
//! Every source of randomness in a run is a ChaCha stream derived from the
//! single top-level seed, a purpose tag, and an index (step or epoch). A
//! consumer never shares a stream with another purpose, so enabling or
//! disabling one module cannot shift the draws seen by any other module, and
//! any step's randomness can be regenerated from (seed, purpose, index) alone
//! when resuming from a checkpoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Purpose tags for derived streams. The numeric values are part of the
/// reproducibility contract: changing them changes every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization (index = 0).
    Init,
    /// Per-epoch dataset shuffle (index = epoch).
    Shuffle,
    /// Per-epoch caption choice (index = epoch).
    Caption,
    /// Per-step mask ratio + mask position sampling (index = step).
    Mask,
    /// Per-step word-pair subsampling (index = step).
    Pairs,
    /// Evaluation-time masking (index = record index).
    EvalMask,
    /// Synthetic corpus generation (index = 0).
    Synthetic,
    /// Frozen toy text-embedding table (index = 0).
    TextTable,
    /// Evaluation-time word-pair subsampling (index = record index).
    EvalPairs,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Caption => 3,
            Stream::Mask => 4,
            Stream::Pairs => 5,
            Stream::EvalMask => 6,
            Stream::Synthetic => 7,
            Stream::TextTable => 8,
            Stream::EvalPairs => 9,
        }
    }
}

/// Derive an independent generator for (seed, purpose, index).
pub fn derive(seed: u64, purpose: Stream, index: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.tag().to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_inputs_same_stream() {
        let mut a = derive(7, Stream::Mask, 3);
        let mut b = derive(7, Stream::Mask, 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn purposes_and_indices_are_independent() {
        let mut a = derive(7, Stream::Mask, 3);
        let mut b = derive(7, Stream::Pairs, 3);
        let mut c = derive(7, Stream::Mask, 4);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }
}
