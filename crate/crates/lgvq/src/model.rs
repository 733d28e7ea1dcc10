//! The full trainable model: convolutional autoencoder, codebook, code
//! transformer, and masked-word predictor, built in a fixed order from one
//! seeded stream so parameter layout is reproducible.

use crate::align::{CodeTransformer, MaskedTextPredictor};
use crate::config::Config;
use crate::nn::{Conv2d, ConvTranspose2d};
use crate::params::{ParamId, ParamStore};
use crate::rngs::{derive, Stream};
use crate::tensor::{Tape, TensorId};
use crate::vq::init_codebook;

/// Stride-2 convolutional stack ending in a 1×1 projection to code space.
pub struct Encoder {
    convs: Vec<Conv2d>,
    to_code: Conv2d,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha12Rng,
        channels: &[usize],
        d_z: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("encoder.conv{i}"),
                cin,
                cout,
                3,
                2,
                1,
            ));
            cin = cout;
        }
        let to_code = Conv2d::new(store, rng, "encoder.to_code", cin, d_z, 1, 1, 0);
        Encoder { convs, to_code }
    }

    /// `[B, 3, S, S]` -> `[B, d_z, S/f, S/f]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(t, store, h);
            h = t.relu(h);
        }
        self.to_code.forward(t, store, h)
    }

    /// Grid features flattened to centered, unit-norm rows `[B·(S/f)², d_z]`
    /// — the representation the quantizer sees. Per-image centering strips
    /// the shared background component so positions compete on what differs
    /// between them; normalizing keeps the feature cloud at a fixed scale, so
    /// slow-moving codebook entries compete on direction instead of being
    /// outrun by growing activations.
    pub fn feature_rows(&self, t: &mut Tape, store: &ParamStore, x: TensorId) -> TensorId {
        let grid = self.forward(t, store, x);
        let s = t.shape(grid).to_vec();
        let rows = t.chw_to_rows(grid);
        let centered = t.center_rows_blockwise(rows, s[2] * s[3]);
        t.normalize_rows_safe(centered)
    }
}

/// Mirror of the encoder: 1×1 lift from code space, then stride-2 transposed
/// convolutions back to pixel space (last layer emits RGB, no activation).
pub struct Decoder {
    from_code: Conv2d,
    deconvs: Vec<ConvTranspose2d>,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha12Rng,
        channels: &[usize],
        d_z: usize,
    ) -> Self {
        let widest = *channels.last().expect("at least one stage");
        let from_code = Conv2d::new(store, rng, "decoder.from_code", d_z, widest, 1, 1, 0);
        let mut deconvs = Vec::new();
        let mut cin = widest;
        // walk the widths backwards; the final stage outputs RGB
        for i in (0..channels.len()).rev() {
            let cout = if i == 0 { 3 } else { channels[i - 1] };
            deconvs.push(ConvTranspose2d::new(
                store,
                rng,
                &format!("decoder.deconv{}", channels.len() - 1 - i),
                cin,
                cout,
                4,
                2,
                1,
            ));
            cin = cout;
        }
        Decoder { from_code, deconvs }
    }

    /// `[B, d_z, s, s]` -> `[B, 3, s*f, s*f]` (unclamped).
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, z: TensorId) -> TensorId {
        let mut h = self.from_code.forward(t, store, z);
        h = t.relu(h);
        let last = self.deconvs.len() - 1;
        for (i, de) in self.deconvs.iter().enumerate() {
            h = de.forward(t, store, h);
            if i != last {
                h = t.relu(h);
            }
        }
        h
    }
}

pub struct Models {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: ParamId,
    pub code_tf: CodeTransformer,
    pub predictor: MaskedTextPredictor,
}

impl Models {
    pub fn new(cfg: &Config, vocab_size: usize) -> Models {
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, Stream::Init, 0);
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.channels, cfg.d_z);
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.channels, cfg.d_z);
        let codebook = init_codebook(&mut store, cfg.seed, cfg.codebook_size, cfg.d_z);
        let code_tf = CodeTransformer::new(
            &mut store,
            &mut rng,
            "code_tf",
            cfg.d_z,
            cfg.d_t,
            cfg.grid_tokens(),
            cfg.transformer_depth,
            cfg.transformer_heads,
        );
        let predictor = MaskedTextPredictor::new(
            &mut store,
            &mut rng,
            "mtp",
            cfg.d_t,
            cfg.seq_len,
            vocab_size,
            cfg.text_heads,
        );
        Models {
            store,
            encoder,
            decoder,
            codebook,
            code_tf,
            predictor,
        }
    }
}
