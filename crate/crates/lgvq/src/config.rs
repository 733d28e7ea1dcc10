//! Run configuration: a flat key/value text format with defaults, override
//! merging, exhaustive validation (every problem reported at once, unknown
//! keys rejected), and a writer that emits the fully-resolved form so any
//! run can be reproduced from the file it leaves behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextEncoderChoice {
    /// Seeded deterministic embedding table (self-contained).
    Table,
    /// Embeddings precomputed offline and loaded from `text_embeddings`.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    /// Spatial down-sampling factor; the encoder has log2(f) stride-2 stages.
    pub f: usize,
    /// Encoder stage widths, outermost first; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub d_z: usize,
    pub codebook_size: usize,
    pub d_t: usize,
    pub seq_len: usize,
    pub transformer_depth: usize,
    pub transformer_heads: usize,
    /// Head count for the text-side attention blocks (mask adapter, decoder).
    pub text_heads: usize,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub mask_mu: f64,
    pub mask_sigma: f64,
    pub mask_lo: f64,
    pub mask_hi: f64,
    pub pair_cap: usize,
    pub gsa_temperature: f64,
    pub gsa_symmetric: bool,
    /// When true, zero-weighted auxiliary losses are still computed (and
    /// scaled by exactly 0) instead of skipped. Exists to demonstrate that
    /// the two paths train identically.
    pub compute_zero_weighted: bool,
    pub text_encoder: TextEncoderChoice,
    pub text_embeddings: String,
    /// Vocabulary file path; empty means build the vocabulary from the
    /// manifest's captions.
    pub vocab: String,
    pub manifest: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            image_size: 64,
            f: 8,
            channels: vec![16, 32, 64],
            d_z: 16,
            codebook_size: 64,
            d_t: 64,
            seq_len: 16,
            transformer_depth: 2,
            transformer_heads: 4,
            text_heads: 4,
            omega: 0.25,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 200,
            mask_mu: 0.55,
            mask_sigma: 0.25,
            mask_lo: 0.5,
            mask_hi: 1.0,
            pair_cap: 32,
            gsa_temperature: 0.1,
            gsa_symmetric: false,
            compute_zero_weighted: false,
            text_encoder: TextEncoderChoice::Table,
            text_embeddings: String::new(),
            vocab: String::new(),
            manifest: String::new(),
        }
    }
}

impl Config {
    /// Code tokens per image.
    pub fn grid_tokens(&self) -> usize {
        let side = self.image_size / self.f;
        side * side
    }

    /// Parse a config file's text, then apply `overrides` (later wins).
    /// Every syntax error, unknown key, bad value, and constraint violation
    /// is collected and reported together.
    pub fn from_sources(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Config> {
        let mut cfg = Config::default();
        let mut errors = Vec::new();
        if let Some(text) = file_text {
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('=') {
                    None => errors.push(format!("line {}: expected key=value", lineno + 1)),
                    Some((k, v)) => {
                        if let Err(e) = cfg.set(k.trim(), v.trim()) {
                            errors.push(format!("line {}: {e}", lineno + 1));
                        }
                    }
                }
            }
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                errors.push(format!("override {k}: {e}"));
            }
        }
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Config::from_sources(Some(&text), overrides)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse::<T>().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got '{v}'")),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "f" => self.f = num(key, value)?,
            "channels" => {
                let parsed: std::result::Result<Vec<usize>, _> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect();
                self.channels =
                    parsed.map_err(|_| format!("channels: cannot parse '{value}'"))?;
            }
            "d_z" => self.d_z = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "d_t" => self.d_t = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "transformer_depth" => self.transformer_depth = num(key, value)?,
            "transformer_heads" => self.transformer_heads = num(key, value)?,
            "text_heads" => self.text_heads = num(key, value)?,
            "omega" => self.omega = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "mask_mu" => self.mask_mu = num(key, value)?,
            "mask_sigma" => self.mask_sigma = num(key, value)?,
            "mask_lo" => self.mask_lo = num(key, value)?,
            "mask_hi" => self.mask_hi = num(key, value)?,
            "pair_cap" => self.pair_cap = num(key, value)?,
            "gsa_temperature" => self.gsa_temperature = num(key, value)?,
            "gsa_symmetric" => self.gsa_symmetric = flag(key, value)?,
            "compute_zero_weighted" => self.compute_zero_weighted = flag(key, value)?,
            "text_encoder" => {
                self.text_encoder = match value {
                    "table" => TextEncoderChoice::Table,
                    "precomputed" => TextEncoderChoice::Precomputed,
                    _ => {
                        return Err(format!(
                            "text_encoder: expected 'table' or 'precomputed', got '{value}'"
                        ))
                    }
                }
            }
            "text_embeddings" => self.text_embeddings = value.to_string(),
            "vocab" => self.vocab = value.to_string(),
            "manifest" => self.manifest = value.to_string(),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.image_size == 0 {
            errs.push("image_size: must be positive".into());
        }
        if !self.f.is_power_of_two() || self.f < 2 {
            errs.push(format!("f: must be a power of two >= 2, got {}", self.f));
        } else {
            let depth = self.f.trailing_zeros() as usize;
            if self.channels.len() != depth {
                errs.push(format!(
                    "channels: f={} needs {} stride-2 stages, got {} widths",
                    self.f,
                    depth,
                    self.channels.len()
                ));
            }
            if self.image_size % self.f != 0 {
                errs.push(format!(
                    "image_size: {} not divisible by f={}",
                    self.image_size, self.f
                ));
            }
        }
        if self.channels.iter().any(|&c| c == 0) {
            errs.push("channels: widths must be positive".into());
        }
        if self.d_z == 0 {
            errs.push("d_z: must be positive".into());
        }
        if self.codebook_size < 2 {
            errs.push(format!("codebook_size: must be >= 2, got {}", self.codebook_size));
        }
        if self.d_t == 0 {
            errs.push("d_t: must be positive".into());
        }
        if self.seq_len < 3 {
            errs.push(format!("seq_len: must be >= 3, got {}", self.seq_len));
        }
        if self.transformer_depth == 0 {
            errs.push("transformer_depth: must be >= 1".into());
        }
        if self.transformer_heads == 0 || self.d_t % self.transformer_heads.max(1) != 0 {
            errs.push(format!(
                "transformer_heads: d_t={} must divide evenly into {} heads",
                self.d_t, self.transformer_heads
            ));
        }
        if self.text_heads == 0 || self.d_t % self.text_heads.max(1) != 0 {
            errs.push(format!(
                "text_heads: d_t={} must divide evenly into {} heads",
                self.d_t, self.text_heads
            ));
        }
        for (name, v) in [
            ("omega", self.omega),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                errs.push(format!("{name}: must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("lr: must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            errs.push("adam_beta1/adam_beta2: must lie in [0, 1)".into());
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            errs.push("adam_eps: must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be >= 1".into());
        }
        if self.steps == 0 {
            errs.push("steps: must be >= 1".into());
        }
        if !(self.mask_sigma.is_finite() && self.mask_sigma > 0.0) {
            errs.push("mask_sigma: must be positive".into());
        }
        if !(self.mask_lo < self.mask_hi) {
            errs.push(format!(
                "mask_lo/mask_hi: need lo < hi, got {} >= {}",
                self.mask_lo, self.mask_hi
            ));
        }
        if self.mask_lo < 0.0 || self.mask_hi > 1.0 {
            errs.push("mask_lo/mask_hi: bounds must lie within [0, 1]".into());
        }
        if !(self.gsa_temperature.is_finite() && self.gsa_temperature > 0.0) {
            errs.push("gsa_temperature: must be positive".into());
        }
        if self.text_encoder == TextEncoderChoice::Precomputed && self.text_embeddings.is_empty() {
            errs.push("text_embeddings: required when text_encoder = precomputed".into());
        }
        errs
    }

    /// The fully-resolved key=value form; parsing it back yields `self`.
    pub fn to_kv_string(&self) -> String {
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let encoder = match self.text_encoder {
            TextEncoderChoice::Table => "table",
            TextEncoderChoice::Precomputed => "precomputed",
        };
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("seed", self.seed.to_string());
        pairs.insert("image_size", self.image_size.to_string());
        pairs.insert("f", self.f.to_string());
        pairs.insert("channels", channels);
        pairs.insert("d_z", self.d_z.to_string());
        pairs.insert("codebook_size", self.codebook_size.to_string());
        pairs.insert("d_t", self.d_t.to_string());
        pairs.insert("seq_len", self.seq_len.to_string());
        pairs.insert("transformer_depth", self.transformer_depth.to_string());
        pairs.insert("transformer_heads", self.transformer_heads.to_string());
        pairs.insert("text_heads", self.text_heads.to_string());
        pairs.insert("omega", fmt_f64(self.omega));
        pairs.insert("alpha", fmt_f64(self.alpha));
        pairs.insert("beta", fmt_f64(self.beta));
        pairs.insert("gamma", fmt_f64(self.gamma));
        pairs.insert("lr", fmt_f64(self.lr));
        pairs.insert("adam_beta1", fmt_f64(self.adam_beta1));
        pairs.insert("adam_beta2", fmt_f64(self.adam_beta2));
        pairs.insert("adam_eps", fmt_f64(self.adam_eps));
        pairs.insert("batch_size", self.batch_size.to_string());
        pairs.insert("steps", self.steps.to_string());
        pairs.insert("mask_mu", fmt_f64(self.mask_mu));
        pairs.insert("mask_sigma", fmt_f64(self.mask_sigma));
        pairs.insert("mask_lo", fmt_f64(self.mask_lo));
        pairs.insert("mask_hi", fmt_f64(self.mask_hi));
        pairs.insert("pair_cap", self.pair_cap.to_string());
        pairs.insert("gsa_temperature", fmt_f64(self.gsa_temperature));
        pairs.insert("gsa_symmetric", self.gsa_symmetric.to_string());
        pairs.insert(
            "compute_zero_weighted",
            self.compute_zero_weighted.to_string(),
        );
        pairs.insert("text_encoder", encoder.to_string());
        pairs.insert("text_embeddings", self.text_embeddings.clone());
        pairs.insert("vocab", self.vocab.clone());
        pairs.insert("manifest", self.manifest.clone());
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }
}

/// Shortest decimal form that round-trips the exact f64.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
