//! Semantic alignment between code tokens and frozen text embeddings:
//! a transformer over the quantized code sequence with a learnable global
//! token, a batch-contrastive global alignment loss, and masked word
//! prediction from code tokens.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::nn::{gaussian, CrossAttnBlock, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// Cosine similarity of two equal-length vectors (plain values).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    assert!(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
    dot / (na * nb)
}

/// Transformer over the quantized code sequence. A learnable global token is
/// prepended, learnable position embeddings are added, and the output is
/// projected into the text embedding space. Row 0 of the output is the
/// image-level feature; rows 1.. correspond to the code tokens in order.
pub struct CodeTransformer {
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl CodeTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_z: usize,
        d_t: usize,
        max_tokens: usize,
        depth: usize,
        heads: usize,
    ) -> Self {
        let proj = Linear::new(store, rng, &format!("{name}.proj"), d_z, d_t);
        let cls = store.add(
            &format!("{name}.cls"),
            &[1, d_t],
            gaussian(rng, 0.02, d_t),
        );
        let pos = store.add(
            &format!("{name}.pos"),
            &[1 + max_tokens, d_t],
            gaussian(rng, 0.02, (1 + max_tokens) * d_t),
        );
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("{name}.block{i}"), d_t, heads))
            .collect();
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d_t);
        CodeTransformer {
            cls,
            pos,
            blocks,
            ln,
            proj,
        }
    }

    /// Per-code text-space embeddings `[L, d_t]`: unit-normalized code rows
    /// (direction-only, so contrast survives tiny codebook norms) lifted by
    /// the shared projection. No positional or attention mixing — row `i`
    /// depends only on code `i`, which makes this the right space for
    /// matching individual words to individual codes.
    pub fn lift(&self, t: &mut Tape, store: &ParamStore, code_rows: TensorId) -> TensorId {
        let code_rows = t.normalize_rows_safe(code_rows);
        self.proj.forward(t, store, code_rows)
    }

    /// `code_rows` is the `[L, d_z]` sequence of quantized code embeddings
    /// (gathered codebook rows, so gradients reach the codebook), lifted into
    /// the text dimension before the attention blocks. Output is `[L+1, d_t]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, code_rows: TensorId) -> TensorId {
        let l = t.shape(code_rows)[0];
        let lifted = self.lift(t, store, code_rows);
        let cls = t.bind(store, self.cls);
        let mut x = t.concat_rows(&[cls, lifted]);
        let pos = t.bind(store, self.pos);
        let idx: Vec<usize> = (0..=l).collect();
        let pos_rows = t.rows(pos, &idx);
        x = t.add(x, pos_rows);
        for b in &self.blocks {
            x = b.forward(t, store, x);
        }
        self.ln.forward(t, store, x)
    }
}

/// Batch-contrastive alignment of image-level and caption-level features.
/// For each image the matching caption is the positive and every other
/// caption in the batch is a negative; the logit for pair (i, j) is the
/// cosine similarity, optionally divided by `temperature`. The loss is a sum
/// over the batch, not a mean. With `symmetric` the mirrored caption-to-image
/// direction is averaged in.
pub fn gsa_loss(
    t: &mut Tape,
    img: TensorId,
    txt: TensorId,
    temperature: f64,
    symmetric: bool,
) -> TensorId {
    assert!(temperature > 0.0, "temperature must be positive");
    let ni = t.normalize_rows(img);
    let nt = t.normalize_rows(txt);
    let one_way = |t: &mut Tape, a: TensorId, b: TensorId| {
        let mut sims = t.matmul_nt(a, b);
        if temperature != 1.0 {
            sims = t.scale(sims, 1.0 / temperature);
        }
        let lse = t.logsumexp_rows(sims);
        let d = t.diag(sims);
        let per = t.sub(lse, d);
        t.sum_all(per)
    };
    let i2t = one_way(t, ni, nt);
    if symmetric {
        let t2i = one_way(t, nt, ni);
        let s = t.add(i2t, t2i);
        t.scale(s, 0.5)
    } else {
        i2t
    }
}

/// Mask-ratio distribution: a Gaussian restricted to `[lo, hi]`, sampled by
/// inverse-CDF transform of a single uniform draw.
pub struct MaskRatioSampler {
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    cdf_lo: f64,
    cdf_hi: f64,
}

impl MaskRatioSampler {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Self {
        assert!(sigma > 0.0 && lo < hi);
        let std = Normal::new(0.0, 1.0).unwrap();
        let cdf_lo = std.cdf((lo - mu) / sigma);
        let cdf_hi = std.cdf((hi - mu) / sigma);
        MaskRatioSampler {
            mu,
            sigma,
            lo,
            hi,
            cdf_lo,
            cdf_hi,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        let std = Normal::new(0.0, 1.0).unwrap();
        let u: f64 = rng.gen();
        let p = self.cdf_lo + u * (self.cdf_hi - self.cdf_lo);
        let x = self.mu + self.sigma * std.inverse_cdf(p);
        x.clamp(self.lo, self.hi)
    }

    /// Exact mean of the truncated distribution (closed form).
    pub fn mean(&self) -> f64 {
        let std = Normal::new(0.0, 1.0).unwrap();
        let a = (self.lo - self.mu) / self.sigma;
        let b = (self.hi - self.mu) / self.sigma;
        let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        self.mu + self.sigma * (pdf(a) - pdf(b)) / (std.cdf(b) - std.cdf(a))
    }
}

/// Choose `round(ratio * (seq_len - 2))` distinct word positions to mask,
/// uniformly without replacement, returned sorted. When the caption has
/// fewer words than that count, every word position is masked.
pub fn choose_masked(
    rng: &mut ChaCha12Rng,
    positions: &[usize],
    ratio: f64,
    seq_len: usize,
) -> Vec<usize> {
    assert!(seq_len >= 2);
    let m = positions.len();
    let want = (ratio * (seq_len - 2) as f64).round() as usize;
    let k = want.min(m);
    if k == 0 {
        return Vec::new();
    }
    let mut pool: Vec<usize> = positions.to_vec();
    // partial Fisher-Yates: fix the first k slots
    for i in 0..k {
        let j = rng.gen_range(i..m);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// Predicts masked caption words from the code-token representation.
/// Masked positions are replaced by learnable per-position embeddings; a
/// self-attention block adapts the mixed sequence, a cross-attention block
/// reads from the code tokens, and a linear head produces vocabulary logits.
pub struct MaskedTextPredictor {
    pub mask_emb: ParamId,
    pub adapter: TransformerBlock,
    pub decoder: CrossAttnBlock,
    pub head: Linear,
}

impl MaskedTextPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_t: usize,
        seq_len: usize,
        vocab: usize,
        heads: usize,
    ) -> Self {
        let mask_emb = store.add(
            &format!("{name}.mask_emb"),
            &[seq_len, d_t],
            gaussian(rng, 0.02, seq_len * d_t),
        );
        MaskedTextPredictor {
            mask_emb,
            adapter: TransformerBlock::new(store, rng, &format!("{name}.adapter"), d_t, heads),
            decoder: CrossAttnBlock::new(store, rng, &format!("{name}.decoder"), d_t, heads),
            head: Linear::new(store, rng, &format!("{name}.head"), d_t, vocab),
        }
    }

    /// Replace masked rows of the frozen caption embedding with the
    /// per-position learnable mask embeddings, then run the self-attention
    /// adapter so mask rows pick up context from unmasked words. `text_rows`
    /// is flat `[n * d_t]`; output is `[n, d_t]`.
    pub fn apply_mask(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        text_rows: &[f64],
        masked: &[usize],
        d_t: usize,
    ) -> TensorId {
        assert_eq!(text_rows.len() % d_t, 0);
        let n = text_rows.len() / d_t;
        // frozen rows, with masked rows blanked out...
        let mut base = text_rows.to_vec();
        for &p in masked {
            assert!(p < n, "masked position {p} outside sequence of length {n}");
            base[p * d_t..(p + 1) * d_t].fill(0.0);
        }
        let base = t.constant(&[n, d_t], base);
        let mut x = base;
        // ...then scatter the learnable mask embeddings into those rows via a
        // constant selection matrix, so gradients reach exactly those rows.
        if !masked.is_empty() {
            let emb = t.bind(store, self.mask_emb);
            let sel_rows = t.rows(emb, masked);
            let mut sel = vec![0.0; n * masked.len()];
            for (i, &p) in masked.iter().enumerate() {
                sel[p * masked.len() + i] = 1.0;
            }
            let sel = t.constant(&[n, masked.len()], sel);
            let scattered = t.matmul(sel, sel_rows);
            x = t.add(base, scattered);
        }
        self.adapter.forward(t, store, x)
    }

    /// Vocabulary logits at the masked positions: the adapted sequence
    /// queries the code-token representation through cross-attention, and a
    /// linear head scores the vocabulary. Output is `[masked.len(), V]`.
    pub fn predict(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        adapted: TensorId,
        masked: &[usize],
        code_repr: TensorId,
    ) -> TensorId {
        assert!(!masked.is_empty(), "nothing to predict");
        let x = self.decoder.forward(t, store, adapted, code_repr);
        let picked = t.rows(x, masked);
        self.head.forward(t, store, picked)
    }
}

/// Mean cross-entropy of masked-position logits `[k, V]` against the true
/// word ids; zero when nothing is masked.
pub fn mtp_loss(t: &mut Tape, logits: Option<TensorId>, targets: &[usize]) -> TensorId {
    match logits {
        None => {
            assert!(targets.is_empty(), "targets without logits");
            t.scalar(0.0)
        }
        Some(l) => {
            assert_eq!(t.shape(l)[0], targets.len(), "one target per masked position");
            t.cross_entropy_mean(l, targets)
        }
    }
}
