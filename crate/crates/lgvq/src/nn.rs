//! Layers built on the tape: linear, layer norm, convolutions, attention,
//! and pre-norm transformer blocks. Constructors register parameters in a
//! [`ParamStore`] under dotted names (`encoder.conv0.w`, ...); forward
//! methods bind them on the current tape.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// Glorot-uniform values for a weight with the given fan-in/out.
pub fn glorot(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// N(0, std) values, used for embedding-style parameters.
pub fn gaussian(rng: &mut ChaCha12Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = statrs::distribution::Normal::new(0.0, std).expect("std > 0");
    (0..n).map(|_| rng.sample(dist)).collect()
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            &[din, dout],
            glorot(rng, din, dout, din * dout),
        );
        let b = store.add(&format!("{name}.b"), &[dout], vec![0.0; dout]);
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let w = t.bind(store, self.w);
        let b = t.bind(store, self.b);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], vec![1.0; dim]);
        let beta = store.add(&format!("{name}.beta"), &[dim], vec![0.0; dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let g = t.bind(store, self.gamma);
        let b = t.bind(store, self.beta);
        t.layer_norm(x, g, b)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = ci * k * k;
        let fan_out = co * k * k;
        let w = store.add(
            &format!("{name}.w"),
            &[co, ci, k, k],
            glorot(rng, fan_in, fan_out, co * ci * k * k),
        );
        let b = store.add(&format!("{name}.b"), &[co], vec![0.0; co]);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let w = t.bind(store, self.w);
        let b = t.bind(store, self.b);
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = ci * k * k;
        let fan_out = co * k * k;
        let w = store.add(
            &format!("{name}.w"),
            &[ci, co, k, k],
            glorot(rng, fan_in, fan_out, ci * co * k * k),
        );
        let b = store.add(&format!("{name}.b"), &[co], vec![0.0; co]);
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let w = t.bind(store, self.w);
        let b = t.bind(store, self.b);
        t.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Multi-head attention over unbatched sequences (`[n, d]` rows). The same
/// module serves self-attention (`kv == q`) and cross-attention.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        q_in: TensorId,
        kv_in: TensorId,
    ) -> TensorId {
        let dh = self.dim / self.heads;
        let q = self.wq.forward(t, store, q_in);
        let k = self.wk.forward(t, store, kv_in);
        let v = self.wv.forward(t, store, kv_in);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * dh;
            let hi = lo + dh;
            let qh = t.cols(q, lo, hi);
            let kh = t.cols(k, lo, hi);
            let vh = t.cols(v, lo, hi);
            let scores = t.matmul_nt(qh, kh);
            let scaled = t.scale(scores, scale);
            let attn = t.softmax_rows(scaled);
            per_head.push(t.matmul(attn, vh));
        }
        let merged = t.concat_cols(&per_head);
        self.wo.forward(t, store, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`
/// with a GELU feed-forward expanding 4x.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, dim * 4),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), dim * 4, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let n = self.ln1.forward(t, store, x);
        let a = self.attn.forward(t, store, n, n);
        let x = t.add(x, a);
        let n = self.ln2.forward(t, store, x);
        let h = self.ff1.forward(t, store, n);
        let h = t.gelu(h);
        let f = self.ff2.forward(t, store, h);
        t.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend to a fixed memory, then a
/// GELU feed-forward, both with residuals.
pub struct CrossAttnBlock {
    pub ln_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossAttnBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        CrossAttnBlock {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, dim * 4),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), dim * 4, dim),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        q: TensorId,
        memory: TensorId,
    ) -> TensorId {
        let n = self.ln_q.forward(t, store, q);
        let a = self.attn.forward(t, store, n, memory);
        let x = t.add(q, a);
        let n = self.ln2.forward(t, store, x);
        let h = self.ff1.forward(t, store, n);
        let h = t.gelu(h);
        let f = self.ff2.forward(t, store, h);
        t.add(x, f)
    }
}
