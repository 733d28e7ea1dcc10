//! Quantitative diagnostics over a frozen model: reconstruction PSNR,
//! codebook usage and perplexity, masked-word recall, image-to-text
//! retrieval, and the code–word similarity gap. Everything here is
//! deterministic for a fixed (model, dataset, seed).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::align::cosine;
use crate::config::Config;
use crate::data::Dataset;
use crate::model::Models;
use crate::relation::{content_positions, match_word_to_code, select_word_pairs};
use crate::rngs::{derive, Stream};
use crate::tensor::Tape;
use crate::text::{word_positions, TextEncoder, Vocabulary};
use crate::train::Trainer;
use crate::vq::quantize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean reconstruction PSNR over the evaluation records, in dB.
    pub psnr_db: f64,
    pub codebook_usage_pct: f64,
    pub codebook_perplexity: f64,
    pub recall_at_1: f64,
    /// Captions skipped because they had fewer word tokens than the mask
    /// count asks for.
    pub recall_skipped: usize,
    pub retrieval_top1: f64,
    /// Mean squared code–word similarity gap; absent when no caption yields
    /// any word pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_mse: Option<f64>,
}

/// Peak signal-to-noise ratio for two same-shape images in [0, 1], capped at
/// 100 dB once the error falls below 1e-10.
pub fn psnr(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "psnr inputs must share a shape");
    assert!(!x.is_empty());
    let mse = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse < 1e-10 {
        100.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Usage percentage (distinct entries hit / K) and exponentiated entropy of
/// the empirical selection distribution.
pub fn usage_stats(counts: &[u64]) -> (f64, f64) {
    let k = counts.len();
    assert!(k > 0);
    let total: u64 = counts.iter().sum();
    assert!(total > 0, "usage statistics need at least one selection");
    let used = counts.iter().filter(|&&c| c > 0).count();
    let mut entropy = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    (used as f64 / k as f64 * 100.0, entropy.exp())
}

/// Fraction of images whose own caption feature is the most cosine-similar
/// of all caption features. Ties break to the lowest caption index.
pub fn retrieval_top1_features(img: &[Vec<f64>], txt: &[Vec<f64>]) -> f64 {
    assert_eq!(img.len(), txt.len(), "paired feature lists");
    assert!(!img.is_empty());
    let mut hits = 0usize;
    for (i, f) in img.iter().enumerate() {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, g) in txt.iter().enumerate() {
            let sim = cosine(f, g);
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    hits as f64 / img.len() as f64
}

/// `k` distinct entries of `positions`, chosen uniformly, sorted.
fn choose_k(rng: &mut ChaCha12Rng, positions: &[usize], k: usize) -> Vec<usize> {
    let m = positions.len();
    assert!(k <= m);
    let mut pool = positions.to_vec();
    for i in 0..k {
        let j = rng.gen_range(i..m);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// True when `target`'s score ranks within the first `top` entries, ranking
/// by score descending with ties broken toward lower token ids.
fn in_top(scores: &[f64], target: usize, top: usize) -> bool {
    let t = scores[target];
    let mut better = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > t || (s == t && i < target) {
            better += 1;
        }
    }
    better < top
}

/// Masked-word recall with an injectable scorer (the model in production;
/// oracles in tests). For every record, exactly `k_masked` word positions of
/// caption 0 are masked with a per-record seeded draw; a caption with fewer
/// word tokens is skipped and counted. Returns (recall, positions scored,
/// captions skipped).
pub fn masked_word_recall_with(
    dataset: &Dataset,
    vocab: &Vocabulary,
    seq_len: usize,
    seed: u64,
    k_masked: usize,
    top: usize,
    scorer: &mut dyn FnMut(usize, &[usize], &[usize]) -> Vec<Vec<f64>>,
) -> (f64, usize, usize) {
    assert!(k_masked >= 1);
    let mut hits = 0usize;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (ri, rec) in dataset.records.iter().enumerate() {
        let tokens = vocab.tokenize(&rec.captions[0], seq_len);
        let words = word_positions(&tokens);
        if words.len() < k_masked {
            skipped += 1;
            continue;
        }
        let mut rng = derive(seed, Stream::EvalMask, ri as u64);
        let masked = choose_k(&mut rng, &words, k_masked);
        let rows = scorer(ri, &tokens, &masked);
        assert_eq!(rows.len(), masked.len(), "one score row per masked position");
        for (mi, &p) in masked.iter().enumerate() {
            if in_top(&rows[mi], tokens[p], top) {
                hits += 1;
            }
            scored += 1;
        }
    }
    let recall = if scored == 0 {
        0.0
    } else {
        hits as f64 / scored as f64
    };
    (recall, scored, skipped)
}

pub struct Evaluator<'a> {
    pub cfg: &'a Config,
    pub models: &'a Models,
    pub vocab: &'a Vocabulary,
    pub text_enc: &'a dyn TextEncoder,
    pub dataset: &'a Dataset,
}

impl<'a> Evaluator<'a> {
    pub fn new(tr: &'a Trainer) -> Evaluator<'a> {
        Evaluator {
            cfg: &tr.cfg,
            models: &tr.models,
            vocab: &tr.vocab,
            text_enc: tr.text_enc.as_ref(),
            dataset: &tr.dataset,
        }
    }

    /// Codebook indices for one CHW image.
    pub fn encode_indices(&self, image: &[f64]) -> Vec<usize> {
        let s = self.cfg.image_size;
        let mut t = Tape::new();
        let x = t.constant(&[1, 3, s, s], image.to_vec());
        let rows = self.models.encoder.feature_rows(&mut t, &self.models.store, x);
        let code = &self.models.store.get(self.models.codebook).value;
        quantize(t.value(rows), code, self.cfg.d_z)
    }

    /// Quantized reconstruction, clamped to [0, 1] (evaluation only — the
    /// training loss sees raw decoder output), plus the code indices.
    pub fn reconstruct(&self, image: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let s = self.cfg.image_size;
        let grid = s / self.cfg.f;
        let mut t = Tape::new();
        let x = t.constant(&[1, 3, s, s], image.to_vec());
        let rows = self.models.encoder.feature_rows(&mut t, &self.models.store, x);
        let code = t.bind(&self.models.store, self.models.codebook);
        let indices = quantize(t.value(rows), t.value(code), self.cfg.d_z);
        let zq = t.rows(code, &indices);
        let zgrid = t.rows_to_chw(zq, 1, self.cfg.d_z, grid, grid);
        let xh = self.models.decoder.forward(&mut t, &self.models.store, zgrid);
        let recon: Vec<f64> = t.value(xh).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        (recon, indices)
    }

    /// Code-token representation (global row first), flat `[(L+1) * d_t]`.
    pub fn code_repr(&self, indices: &[usize]) -> Vec<f64> {
        let mut t = Tape::new();
        let code = t.bind(&self.models.store, self.models.codebook);
        let rows = t.rows(code, indices);
        let zvt = self.models.code_tf.forward(&mut t, &self.models.store, rows);
        t.value(zvt).to_vec()
    }

    /// Per-code text-space embeddings, flat `[L * d_t]` — the word-matching
    /// space (no mixing between positions).
    pub fn code_lift(&self, indices: &[usize]) -> Vec<f64> {
        let mut t = Tape::new();
        let code = t.bind(&self.models.store, self.models.codebook);
        let rows = t.rows(code, indices);
        let lifted = self.models.code_tf.lift(&mut t, &self.models.store, rows);
        t.value(lifted).to_vec()
    }

    /// Vocabulary scores at the masked positions of one record's caption 0.
    pub fn score_masked(
        &self,
        record: usize,
        tokens: &[usize],
        masked: &[usize],
    ) -> Vec<Vec<f64>> {
        let indices = self.encode_indices(&self.dataset.images[record]);
        let mut t = Tape::new();
        let code = t.bind(&self.models.store, self.models.codebook);
        let rows = t.rows(code, &indices);
        let zvt = self.models.code_tf.forward(&mut t, &self.models.store, rows);
        let caption = &self.dataset.records[record].captions[0];
        let (trows, _) = self.text_enc.encode(caption, tokens);
        let adapted = self.models.predictor.apply_mask(
            &mut t,
            &self.models.store,
            &trows,
            masked,
            self.cfg.d_t,
        );
        let logits = self
            .models
            .predictor
            .predict(&mut t, &self.models.store, adapted, masked, zvt);
        let v = self.vocab.len();
        t.value(logits).chunks(v).map(|c| c.to_vec()).collect()
    }

    /// Mean squared gap between word–word and matched-code–code cosine
    /// similarities over the seeded pair selection of every caption 0.
    /// `None` when no caption yields a pair.
    pub fn sim_mse(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (ri, rec) in self.dataset.records.iter().enumerate() {
            let tokens = self.vocab.tokenize(&rec.captions[0], self.cfg.seq_len);
            let content = content_positions(&tokens, self.vocab);
            let mut rng = derive(self.cfg.seed, Stream::EvalPairs, ri as u64);
            let pairs = select_word_pairs(&mut rng, &content, self.cfg.pair_cap);
            if pairs.is_empty() {
                continue;
            }
            let indices = self.encode_indices(&self.dataset.images[ri]);
            let lifted = self.code_lift(&indices);
            let codebook = &self.models.store.get(self.models.codebook).value;
            let d_z = self.cfg.d_z;
            let code_vec = |pos: usize| {
                let id = indices[pos];
                codebook[id * d_z..(id + 1) * d_z].to_vec()
            };
            for (pa, pb) in pairs {
                let wa = self.text_enc.word(tokens[pa], self.vocab.token(tokens[pa]));
                let wb = self.text_enc.word(tokens[pb], self.vocab.token(tokens[pb]));
                let ca = match_word_to_code(&wa, &lifted, self.cfg.d_t);
                let cb = match_word_to_code(&wb, &lifted, self.cfg.d_t);
                let gap = cosine(&wa, &wb) - cosine(&code_vec(ca), &code_vec(cb));
                total += gap * gap;
                count += 1;
            }
        }
        if count == 0 {
            None
        } else {
            Some(total / count as f64)
        }
    }

    /// The full report: PSNR, usage, recall@`top` with `k_masked` masks,
    /// retrieval, similarity gap.
    pub fn report(&self, k_masked: usize, top: usize) -> EvalReport {
        let n = self.dataset.len();
        let mut counts = vec![0u64; self.cfg.codebook_size];
        let mut psnr_sum = 0.0;
        let mut cls = Vec::with_capacity(n);
        let mut eot = Vec::with_capacity(n);
        let d_t = self.cfg.d_t;
        for (ri, rec) in self.dataset.records.iter().enumerate() {
            let (recon, indices) = self.reconstruct(&self.dataset.images[ri]);
            psnr_sum += psnr(&self.dataset.images[ri], &recon);
            for &i in &indices {
                counts[i] += 1;
            }
            let repr = self.code_repr(&indices);
            cls.push(repr[..d_t].to_vec());
            let tokens = self.vocab.tokenize(&rec.captions[0], self.cfg.seq_len);
            let (rows, e) = self.text_enc.encode(&rec.captions[0], &tokens);
            eot.push(rows[e * d_t..(e + 1) * d_t].to_vec());
        }
        let (usage, perplexity) = usage_stats(&counts);
        let mut scorer =
            |ri: usize, tokens: &[usize], masked: &[usize]| self.score_masked(ri, tokens, masked);
        let (recall, _, skipped) = masked_word_recall_with(
            self.dataset,
            self.vocab,
            self.cfg.seq_len,
            self.cfg.seed,
            k_masked,
            top,
            &mut scorer,
        );
        EvalReport {
            psnr_db: psnr_sum / n as f64,
            codebook_usage_pct: usage,
            codebook_perplexity: perplexity,
            recall_at_1: recall,
            recall_skipped: skipped,
            retrieval_top1: retrieval_top1_features(&cls, &eot),
            sim_mse: self.sim_mse(),
        }
    }
}
