//! The training loop: one joint objective over the quantizer and the three
//! language-alignment losses, with per-step metrics and divergence handling.
//!
//! All randomness is drawn from purpose-tagged streams indexed by epoch or
//! step, so a run resumed from a checkpoint continues the exact trajectory of
//! an uninterrupted run, and disabling one loss never shifts the draws seen
//! by another.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{choose_masked, cosine, gsa_loss, mtp_loss, MaskRatioSampler};
use crate::config::{Config, TextEncoderChoice};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::params::Adam;
use crate::relation::{content_positions, match_word_to_code, ras_loss, select_word_pairs, ResolvedPair};
use crate::rngs::{derive, Stream};
use crate::tensor::{Tape, TensorId};
use crate::text::{word_positions, PrecomputedTextEncoder, TableTextEncoder, TextEncoder, Vocabulary};
use crate::vq::{quantize, vq_loss};

/// One line of the per-step metrics stream. `vq`, `gsa`, `mtp`, and `ras`
/// are the raw (unweighted) loss values; `total` is the weighted objective
/// that gradients are taken of.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub vq: f64,
    pub gsa: f64,
    pub mtp: f64,
    pub ras: f64,
    pub total: f64,
    /// Distinct codebook entries hit by this batch.
    pub codebook_usage_batch: usize,
}

/// Build the vocabulary a run trains against: an explicit word list when the
/// config names one, otherwise every distinct caption word in the dataset.
pub fn build_vocab(cfg: &Config, dataset: &Dataset) -> Result<Vocabulary> {
    if cfg.vocab.is_empty() {
        dataset.build_vocabulary()
    } else {
        Vocabulary::from_file(Path::new(&cfg.vocab))
    }
}

/// Instantiate the frozen text encoder the config asks for, validating that
/// it covers the dataset and matches the configured text width.
pub fn build_text_encoder(
    cfg: &Config,
    vocab: &Vocabulary,
    dataset: &Dataset,
) -> Result<Box<dyn TextEncoder>> {
    match cfg.text_encoder {
        TextEncoderChoice::Table => Ok(Box::new(TableTextEncoder::new(
            cfg.seed,
            vocab.len(),
            cfg.d_t,
        ))),
        TextEncoderChoice::Precomputed => {
            let enc = PrecomputedTextEncoder::from_file(Path::new(&cfg.text_embeddings))?;
            if enc.dim() != cfg.d_t {
                return Err(Error::Config(vec![format!(
                    "text_embeddings: dimension {} does not match d_t = {}",
                    enc.dim(),
                    cfg.d_t
                )]));
            }
            if enc.seq_len() != cfg.seq_len {
                return Err(Error::Config(vec![format!(
                    "text_embeddings: sequence length {} does not match seq_len = {}",
                    enc.seq_len(),
                    cfg.seq_len
                )]));
            }
            enc.validate_coverage(dataset.all_captions())?;
            Ok(Box::new(enc))
        }
    }
}

struct Snapshot {
    step: u64,
    params: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

pub struct Trainer {
    pub cfg: Config,
    pub models: Models,
    pub opt: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub text_enc: Box<dyn TextEncoder>,
    sampler: MaskRatioSampler,
    last_good: Option<Snapshot>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("records", &self.dataset.len())
            .field("params", &self.models.store.total_elements())
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Load the dataset named by the config and assemble a fresh trainer.
    pub fn new(cfg: Config) -> Result<Trainer> {
        if cfg.manifest.is_empty() {
            return Err(Error::Config(vec![
                "manifest: a dataset manifest is required".to_string(),
            ]));
        }
        let dataset = load_dataset(Path::new(&cfg.manifest), cfg.image_size)?;
        Trainer::assemble(cfg, dataset)
    }

    /// Assemble a trainer around an already-loaded dataset (fresh
    /// parameters, step 0).
    pub fn assemble(cfg: Config, dataset: Dataset) -> Result<Trainer> {
        let vocab = build_vocab(&cfg, &dataset)?;
        Trainer::assemble_with_vocab(cfg, dataset, vocab)
    }

    /// Assemble with an explicit vocabulary (used when restoring from a
    /// checkpoint, whose head size is fixed by the vocabulary it trained on).
    pub fn assemble_with_vocab(
        cfg: Config,
        dataset: Dataset,
        vocab: Vocabulary,
    ) -> Result<Trainer> {
        let text_enc = build_text_encoder(&cfg, &vocab, &dataset)?;
        let models = Models::new(&cfg, vocab.len());
        let mut opt = Adam::new(&models.store, cfg.lr);
        opt.beta1 = cfg.adam_beta1;
        opt.beta2 = cfg.adam_beta2;
        opt.eps = cfg.adam_eps;
        let sampler = MaskRatioSampler::new(cfg.mask_mu, cfg.mask_sigma, cfg.mask_lo, cfg.mask_hi);
        Ok(Trainer {
            cfg,
            models,
            opt,
            step: 0,
            dataset,
            vocab,
            text_enc,
            sampler,
            last_good: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        let n = self.dataset.len() as u64;
        let b = self.cfg.batch_size as u64;
        n.div_ceil(b)
    }

    /// Record indices and caption choices for the batch at 0-based `step`.
    /// Both are pure functions of (seed, epoch), so any step's batch can be
    /// reconstructed without replaying earlier steps.
    fn batch_for(&self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.dataset.len();
        let bpe = self.batches_per_epoch();
        let epoch = step / bpe;
        let pos = (step % bpe) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive(self.cfg.seed, Stream::Shuffle, epoch));
        let mut cap_rng = derive(self.cfg.seed, Stream::Caption, epoch);
        let choices: Vec<usize> = self
            .dataset
            .records
            .iter()
            .map(|r| cap_rng.gen_range(0..r.captions.len()))
            .collect();
        let lo = pos * self.cfg.batch_size;
        let hi = ((pos + 1) * self.cfg.batch_size).min(n);
        let batch = order[lo..hi].to_vec();
        let caps = batch.iter().map(|&i| choices[i]).collect();
        (batch, caps)
    }

    fn mean_of(&self, t: &mut Tape, parts: &[TensorId]) -> TensorId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p);
        }
        t.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Run one optimizer step. On success the step counter advances; a
    /// non-finite loss raises a divergence error before parameters change.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step_no = self.step + 1;
        let (batch, caps) = self.batch_for(self.step);
        let b = batch.len();
        let cfg = self.cfg.clone();
        let s = cfg.image_size;
        let grid = s / cfg.f;
        let l = grid * grid;

        let mut t = Tape::new();
        let mut xs = Vec::with_capacity(b * 3 * s * s);
        for &i in &batch {
            xs.extend_from_slice(&self.dataset.images[i]);
        }
        let x = t.constant(&[b, 3, s, s], xs);
        let z_rows = self.models.encoder.feature_rows(&mut t, &self.models.store, x);
        let code_node = t.bind(&self.models.store, self.models.codebook);
        let indices = quantize(t.value(z_rows), t.value(code_node), cfg.d_z);
        let z_q = t.rows(code_node, &indices);
        let st = t.straight_through(z_rows, z_q);
        let st_grid = t.rows_to_chw(st, b, cfg.d_z, grid, grid);
        let x_hat = self.models.decoder.forward(&mut t, &self.models.store, st_grid);
        let vq = vq_loss(&mut t, x, x_hat, z_rows, z_q, cfg.omega);

        // A weight of exactly 0 skips a term's computation entirely unless
        // the config asks for the (bit-identical) compute-then-scale-by-zero
        // path.
        let do_gsa = cfg.alpha != 0.0 || cfg.compute_zero_weighted;
        let do_mtp = cfg.beta != 0.0 || cfg.compute_zero_weighted;
        let do_ras = cfg.gamma != 0.0 || cfg.compute_zero_weighted;
        let need_text = do_gsa || do_mtp || do_ras;

        // Per-sample code-token representations and caption encodings.
        let mut code_rows_per = Vec::new();
        let mut zvt_per = Vec::new();
        let mut cls_per = Vec::new();
        let mut tokens_per: Vec<Vec<usize>> = Vec::new();
        let mut text_per: Vec<(Vec<f64>, usize)> = Vec::new();
        if need_text {
            for bi in 0..b {
                let idx = &indices[bi * l..(bi + 1) * l];
                let rows = t.rows(code_node, idx);
                code_rows_per.push(rows);
                if do_gsa || do_mtp {
                    let zvt = self.models.code_tf.forward(&mut t, &self.models.store, rows);
                    let cls = t.rows(zvt, &[0]);
                    zvt_per.push(zvt);
                    cls_per.push(cls);
                }
            }
            for (bi, &i) in batch.iter().enumerate() {
                let caption = &self.dataset.records[i].captions[caps[bi]];
                let tokens = self.vocab.tokenize(caption, cfg.seq_len);
                let enc = self.text_enc.encode(caption, &tokens);
                tokens_per.push(tokens);
                text_per.push(enc);
            }
        }

        let gsa_node = if do_gsa {
            let img = t.concat_rows(&cls_per);
            let mut tvals = Vec::with_capacity(b * cfg.d_t);
            for (rows, eot) in &text_per {
                tvals.extend_from_slice(&rows[eot * cfg.d_t..(eot + 1) * cfg.d_t]);
            }
            let txt = t.constant(&[b, cfg.d_t], tvals);
            Some(gsa_loss(&mut t, img, txt, cfg.gsa_temperature, cfg.gsa_symmetric))
        } else {
            None
        };

        let mtp_node = if do_mtp {
            let mut rng = derive(cfg.seed, Stream::Mask, step_no);
            let mut per = Vec::with_capacity(b);
            for bi in 0..b {
                let ratio = self.sampler.sample(&mut rng);
                let words = word_positions(&tokens_per[bi]);
                let masked = choose_masked(&mut rng, &words, ratio, cfg.seq_len);
                let part = if masked.is_empty() {
                    mtp_loss(&mut t, None, &[])
                } else {
                    let adapted = self.models.predictor.apply_mask(
                        &mut t,
                        &self.models.store,
                        &text_per[bi].0,
                        &masked,
                        cfg.d_t,
                    );
                    let logits = self.models.predictor.predict(
                        &mut t,
                        &self.models.store,
                        adapted,
                        &masked,
                        zvt_per[bi],
                    );
                    let targets: Vec<usize> = masked.iter().map(|&p| tokens_per[bi][p]).collect();
                    mtp_loss(&mut t, Some(logits), &targets)
                };
                per.push(part);
            }
            Some(self.mean_of(&mut t, &per))
        } else {
            None
        };

        let ras_node = if do_ras {
            let mut rng = derive(cfg.seed, Stream::Pairs, step_no);
            let mut per = Vec::with_capacity(b);
            for bi in 0..b {
                let content = content_positions(&tokens_per[bi], &self.vocab);
                let pairs = select_word_pairs(&mut rng, &content, cfg.pair_cap);
                // matching reads values only; no gradient flows through it
                let lift = self.models.code_tf.lift(&mut t, &self.models.store, code_rows_per[bi]);
                let lift_vals = t.value(lift).to_vec();
                let mut word_vec: HashMap<usize, Vec<f64>> = HashMap::new();
                let mut code_of: HashMap<usize, usize> = HashMap::new();
                for &p in &content {
                    let tok = tokens_per[bi][p];
                    let w = self.text_enc.word(tok, self.vocab.token(tok));
                    code_of.insert(p, match_word_to_code(&w, &lift_vals, cfg.d_t));
                    word_vec.insert(p, w);
                }
                let resolved: Vec<ResolvedPair> = pairs
                    .iter()
                    .map(|&(pa, pb)| ResolvedPair {
                        code_a: code_of[&pa],
                        code_b: code_of[&pb],
                        word_sim: cosine(&word_vec[&pa], &word_vec[&pb]),
                    })
                    .collect();
                per.push(ras_loss(&mut t, code_rows_per[bi], &resolved));
            }
            Some(self.mean_of(&mut t, &per))
        } else {
            None
        };

        let mut total = vq.total;
        if let Some(g) = gsa_node {
            let w = t.scale(g, cfg.alpha);
            total = t.add(total, w);
        }
        if let Some(m) = mtp_node {
            let w = t.scale(m, cfg.beta);
            total = t.add(total, w);
        }
        if let Some(r) = ras_node {
            let w = t.scale(r, cfg.gamma);
            total = t.add(total, w);
        }

        let vq_v = t.value(vq.total)[0];
        let gsa_v = gsa_node.map_or(0.0, |n| t.value(n)[0]);
        let mtp_v = mtp_node.map_or(0.0, |n| t.value(n)[0]);
        let ras_v = ras_node.map_or(0.0, |n| t.value(n)[0]);
        let total_v = t.value(total)[0];
        for (name, v) in [
            ("vq", vq_v),
            ("gsa", gsa_v),
            ("mtp", mtp_v),
            ("ras", ras_v),
            ("total", total_v),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: step_no,
                    detail: format!("{name} loss is {v}"),
                });
            }
        }

        let grads = t.backward(total);
        self.opt.step(&mut self.models.store, &t, &grads);
        self.step = step_no;

        let usage: BTreeSet<usize> = indices.iter().copied().collect();
        Ok(StepMetrics {
            step: step_no,
            vq: vq_v,
            gsa: gsa_v,
            mtp: mtp_v,
            ras: ras_v,
            total: total_v,
            codebook_usage_batch: usage.len(),
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            step: self.step,
            params: self.models.store.iter().map(|(_, p)| p.value.clone()).collect(),
            m: self.opt.m.clone(),
            v: self.opt.v.clone(),
            t: self.opt.t,
        }
    }

    fn restore(&mut self, snap: Snapshot) {
        let ids: Vec<_> = self.models.store.iter().map(|(pid, _)| pid).collect();
        for (i, pid) in ids.into_iter().enumerate() {
            self.models.store.get_mut(pid).value = snap.params[i].clone();
        }
        self.opt.m = snap.m;
        self.opt.v = snap.v;
        self.opt.t = snap.t;
        self.step = snap.step;
    }

    /// Train until the configured step count, reporting each step's metrics.
    /// On divergence the trainer rolls back to the last completed step's
    /// state before the error is returned, so the caller can still write a
    /// usable checkpoint.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.cfg.steps {
            match self.train_step() {
                Ok(m) => {
                    on_step(&m);
                    self.last_good = Some(self.snapshot());
                }
                Err(e) => {
                    if let Some(snap) = self.last_good.take() {
                        self.restore(snap);
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}
