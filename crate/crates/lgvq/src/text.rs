//! Vocabulary handling and frozen text encoding.
//!
//! Captions are tokenized against a fixed word list into
//! `[<sot>, w_1..w_m, <eot>, <pad>...]` sequences of a configured length.
//! Text embeddings come from a frozen encoder behind [`TextEncoder`]: either
//! a seeded deterministic table (the default, self-contained setup) or a
//! file of precomputed embeddings produced offline by a real text model.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::nn::gaussian;
use crate::rngs::{derive, Stream};

pub const PAD: usize = 0;
pub const SOT: usize = 1;
pub const EOT: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
/// Ids below this are control tokens, not caption words.
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<sot>", "<eot>", "<unk>", "<mask>"];

pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from caption words. Control tokens occupy ids 0..5 implicitly.
    pub fn new(words: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            let w = w.trim();
            if w.is_empty() {
                continue;
            }
            if index.contains_key(w) {
                return Err(Error::Data(format!("duplicate vocabulary word: {w}")));
            }
            index.insert(w.to_string(), tokens.len());
            tokens.push(w.to_string());
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Read a word list: one word per line, `#` lines are comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("vocabulary {}: {e}", path.display())))?;
        let mut words = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            words.push(line.to_string());
        }
        Vocabulary::new(&words)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# one caption word per line; control tokens are implicit\n");
        for w in &self.tokens[RESERVED..] {
            out.push_str(w);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // control tokens are always present
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercase, strip edge punctuation, split on whitespace.
    pub fn words_of(caption: &str) -> Vec<String> {
        caption
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// Fixed-length token sequence for a caption. Words beyond `seq_len - 2`
    /// are dropped so start and end markers always fit.
    pub fn tokenize(&self, caption: &str, seq_len: usize) -> Vec<usize> {
        assert!(seq_len >= 3, "sequence length must fit <sot> w <eot>");
        let mut out = vec![SOT];
        for w in Self::words_of(caption) {
            if out.len() == seq_len - 1 {
                break;
            }
            out.push(self.id(&w).unwrap_or(UNK));
        }
        out.push(EOT);
        out.resize(seq_len, PAD);
        out
    }

    /// Human-readable rendering of a token sequence (word positions only).
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= RESERVED || t == UNK)
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Position of the end-of-text marker; the encoder output at this row is the
/// caption-level feature.
pub fn eot_position(tokens: &[usize]) -> usize {
    tokens
        .iter()
        .position(|&t| t == EOT)
        .expect("tokenized sequence always contains <eot>")
}

/// Caption word positions (strictly between the start and end markers).
pub fn word_positions(tokens: &[usize]) -> Vec<usize> {
    (1..eot_position(tokens)).collect()
}

/// A frozen source of text embeddings. Implementations must be
/// deterministic: training never updates them.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    /// Embeddings for a tokenized caption, flat `[seq_len * dim]`, plus the
    /// row index of the caption-level feature.
    fn encode(&self, caption: &str, tokens: &[usize]) -> (Vec<f64>, usize);
    /// Embedding of a single caption word, `[dim]`.
    fn word(&self, token_id: usize, word: &str) -> Vec<f64>;
}

/// Deterministic embedding table derived from the seed. Each token id maps
/// to a fixed Gaussian row; the caption-level row is the mean of the word
/// rows, so captions sharing words land near each other.
pub struct TableTextEncoder {
    table: Vec<f64>,
    vocab_size: usize,
    dim: usize,
}

impl TableTextEncoder {
    pub fn new(seed: u64, vocab_size: usize, dim: usize) -> Self {
        let mut rng = derive(seed, Stream::TextTable, 0);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = gaussian(&mut rng, scale, vocab_size * dim);
        TableTextEncoder {
            table,
            vocab_size,
            dim,
        }
    }

    fn row(&self, id: usize) -> &[f64] {
        assert!(id < self.vocab_size, "token id {id} outside table");
        &self.table[id * self.dim..(id + 1) * self.dim]
    }
}

impl TextEncoder for TableTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _caption: &str, tokens: &[usize]) -> (Vec<f64>, usize) {
        let eot = eot_position(tokens);
        let mut out = Vec::with_capacity(tokens.len() * self.dim);
        for &tok in tokens {
            out.extend_from_slice(self.row(tok));
        }
        // caption-level feature: mean of word rows (or the raw <eot> row for
        // a caption with no words)
        let words = word_positions(tokens);
        if !words.is_empty() {
            let mut mean = vec![0.0; self.dim];
            for &p in &words {
                for (m, &v) in mean.iter_mut().zip(self.row(tokens[p])) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= words.len() as f64;
            }
            out[eot * self.dim..(eot + 1) * self.dim].copy_from_slice(&mean);
        }
        (out, eot)
    }

    fn word(&self, token_id: usize, _word: &str) -> Vec<f64> {
        self.row(token_id).to_vec()
    }
}

#[derive(Deserialize)]
struct PrecomputedFile {
    dim: usize,
    seq_len: usize,
    captions: Vec<PrecomputedCaption>,
    words: Vec<PrecomputedWord>,
}

#[derive(Deserialize)]
struct PrecomputedCaption {
    text: String,
    eot: usize,
    rows: Vec<f64>,
}

#[derive(Deserialize)]
struct PrecomputedWord {
    text: String,
    vec: Vec<f64>,
}

/// Embeddings computed offline by a real text model and stored as JSON.
/// Lookup is by exact caption/word string; coverage can be validated against
/// a dataset before training starts.
pub struct PrecomputedTextEncoder {
    dim: usize,
    seq_len: usize,
    captions: HashMap<String, (Vec<f64>, usize)>,
    words: HashMap<String, Vec<f64>>,
}

impl PrecomputedTextEncoder {
    pub fn from_file(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("text embeddings {}: {e}", path.display())))?;
        let file: PrecomputedFile = serde_json::from_str(&data)
            .map_err(|e| Error::Data(format!("text embeddings {}: {e}", path.display())))?;
        let mut captions = HashMap::new();
        for c in file.captions {
            if c.rows.len() != file.seq_len * file.dim {
                return Err(Error::Data(format!(
                    "caption '{}': expected {} values, found {}",
                    c.text,
                    file.seq_len * file.dim,
                    c.rows.len()
                )));
            }
            if c.eot >= file.seq_len {
                return Err(Error::Data(format!(
                    "caption '{}': eot row {} outside sequence",
                    c.text, c.eot
                )));
            }
            captions.insert(c.text, (c.rows, c.eot));
        }
        let mut words = HashMap::new();
        for w in file.words {
            if w.vec.len() != file.dim {
                return Err(Error::Data(format!(
                    "word '{}': expected {} values, found {}",
                    w.text,
                    file.dim,
                    w.vec.len()
                )));
            }
            words.insert(w.text, w.vec);
        }
        Ok(PrecomputedTextEncoder {
            dim: file.dim,
            seq_len: file.seq_len,
            captions,
            words,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Every caption and every caption word must have an embedding.
    pub fn validate_coverage<'a>(
        &self,
        captions: impl Iterator<Item = &'a str>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        for c in captions {
            if !self.captions.contains_key(c) {
                missing.push(format!("caption: {c}"));
            } else {
                for w in Vocabulary::words_of(c) {
                    if !self.words.contains_key(&w) {
                        missing.push(format!("word: {w}"));
                    }
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            missing.sort();
            missing.dedup();
            Err(Error::Data(format!(
                "precomputed text embeddings missing {} entries:\n{}",
                missing.len(),
                missing.join("\n")
            )))
        }
    }
}

impl TextEncoder for PrecomputedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, caption: &str, _tokens: &[usize]) -> (Vec<f64>, usize) {
        let (rows, eot) = self
            .captions
            .get(caption)
            .unwrap_or_else(|| panic!("no precomputed embedding for caption: {caption}"));
        (rows.clone(), *eot)
    }

    fn word(&self, _token_id: usize, word: &str) -> Vec<f64> {
        self.words
            .get(word)
            .unwrap_or_else(|| panic!("no precomputed embedding for word: {word}"))
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        let words: Vec<String> = ["a", "red", "ball", "blue", "square"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocabulary::new(&words).unwrap()
    }

    #[test]
    fn tokenize_pads_and_frames() {
        let v = toy_vocab();
        let toks = v.tokenize("A red ball.", 8);
        assert_eq!(toks[0], SOT);
        assert_eq!(&toks[1..4], &[5, 6, 7]); // a red ball
        assert_eq!(toks[4], EOT);
        assert_eq!(&toks[5..], &[PAD, PAD, PAD]);
        assert_eq!(eot_position(&toks), 4);
        assert_eq!(word_positions(&toks), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_words_map_to_unk_and_long_captions_truncate() {
        let v = toy_vocab();
        let toks = v.tokenize("a purple ball", 8);
        assert_eq!(toks[2], UNK);
        let toks = v.tokenize("a red ball a red ball a red ball", 5);
        assert_eq!(toks.len(), 5);
        assert_eq!(toks[0], SOT);
        assert_eq!(toks[4], EOT);
    }

    #[test]
    fn detokenize_round_trip() {
        let v = toy_vocab();
        let toks = v.tokenize("A RED ball", 8);
        assert_eq!(v.detokenize(&toks), "a red ball");
    }

    #[test]
    fn vocab_file_round_trip_and_duplicate_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = toy_vocab();
        v.write_file(&path).unwrap();
        let v2 = Vocabulary::from_file(&path).unwrap();
        assert_eq!(v.len(), v2.len());
        assert_eq!(v2.id("ball"), Some(7));

        std::fs::write(&path, "red\nred\n").unwrap();
        assert!(Vocabulary::from_file(&path).is_err());
    }

    #[test]
    fn table_encoder_is_frozen_and_mean_pools_at_eot() {
        let v = toy_vocab();
        let enc = TableTextEncoder::new(9, v.len(), 4);
        let toks = v.tokenize("red ball", 6);
        let (rows1, eot) = enc.encode("red ball", &toks);
        let (rows2, _) = enc.encode("red ball", &toks);
        assert_eq!(rows1, rows2, "encoder is deterministic");
        assert_eq!(eot, 3);
        let red = enc.word(v.id("red").unwrap(), "red");
        let ball = enc.word(v.id("ball").unwrap(), "ball");
        for i in 0..4 {
            let mean = (red[i] + ball[i]) / 2.0;
            assert!((rows1[eot * 4 + i] - mean).abs() < 1e-12);
        }
        // word rows are the table rows
        assert_eq!(&rows1[4..8], &red[..]);
    }

    #[test]
    fn precomputed_encoder_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let dim = 3;
        let seq_len = 4;
        let rows: Vec<f64> = (0..seq_len * dim).map(|i| i as f64 * 0.5).collect();
        let file = serde_json::json!({
            "dim": dim, "seq_len": seq_len,
            "captions": [{"text": "red ball", "eot": 3, "rows": rows}],
            "words": [
                {"text": "red", "vec": [1.0, 0.0, 0.0]},
                {"text": "ball", "vec": [0.0, 1.0, 0.0]}
            ]
        });
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let enc = PrecomputedTextEncoder::from_file(&path).unwrap();
        assert_eq!(enc.dim(), 3);
        enc.validate_coverage(["red ball"].into_iter()).unwrap();
        let err = enc
            .validate_coverage(["red ball", "blue square"].into_iter())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blue square"));
        let (rows, eot) = enc.encode("red ball", &[]);
        assert_eq!(eot, 3);
        assert_eq!(rows.len(), 12);
        assert_eq!(enc.word(0, "red"), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn precomputed_encoder_rejects_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let file = serde_json::json!({
            "dim": 3, "seq_len": 4,
            "captions": [{"text": "x", "eot": 1, "rows": [1.0, 2.0]}],
            "words": []
        });
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(PrecomputedTextEncoder::from_file(&path).is_err());
    }
}
