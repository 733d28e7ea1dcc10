//! Checkpoint save/load.
//!
//! Layout: an 8-byte magic, a length-prefixed JSON header (format tag, step,
//! resolved config text, vocabulary, parameter metadata), the raw f64 payload
//! (parameters, then both optimizer moment buffers, little-endian, in store
//! order), and a trailing SHA-256 digest of everything before it. Loading
//! verifies the digest before trusting a single byte, so a torn or corrupted
//! file is a checked error and never partial state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::text::{Vocabulary, RESERVED};
use crate::train::Trainer;

pub const FORMAT: &str = "lgvq-ckpt-v1";
const MAGIC: &[u8; 8] = b"LGVQCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    /// Completed optimizer steps at save time.
    step: u64,
    adam_t: u64,
    /// Fully-resolved config in its text form.
    config: String,
    /// Corpus words (control tokens implied), fixing the predictor head size.
    vocab: Vec<String>,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

fn push_f64s(bytes: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the trainer's full mutable state and write it atomically
/// (temp file + rename).
pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let words: Vec<String> = (RESERVED..trainer.vocab.len())
        .map(|id| trainer.vocab.token(id).to_string())
        .collect();
    let header = Header {
        format: FORMAT.to_string(),
        step: trainer.step,
        adam_t: trainer.opt.t,
        config: trainer.cfg.to_kv_string(),
        vocab: words,
        params: trainer
            .models
            .store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, p) in trainer.models.store.iter() {
        push_f64s(&mut bytes, &p.value);
    }
    for buf in &trainer.opt.m {
        push_f64s(&mut bytes, buf);
    }
    for buf in &trainer.opt.v {
        push_f64s(&mut bytes, buf);
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restore a trainer from a checkpoint. `overrides` are applied on top of
/// the stored config (e.g. a larger step budget to continue training, or a
/// different manifest to evaluate elsewhere); overrides that would change
/// the parameter shapes are rejected by the shape check below.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Trainer> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored_digest = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(format!(
            "{} is corrupted: digest mismatch",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > body.len() {
        return Err(Error::Checkpoint(format!(
            "{} is corrupted: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + hlen])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: incompatible checkpoint format '{}' (expected '{FORMAT}')",
            path.display(),
            header.format
        )));
    }

    let cfg = Config::from_sources(Some(&header.config), overrides)?;
    let dataset = load_dataset(Path::new(&cfg.manifest), cfg.image_size)?;
    let vocab = Vocabulary::new(&header.vocab)?;
    let mut trainer = Trainer::assemble_with_vocab(cfg, dataset, vocab)?;

    // the stored layout must match the rebuilt model exactly
    let store = &trainer.models.store;
    if header.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint has {} parameters, model has {}",
            path.display(),
            header.params.len(),
            store.len()
        )));
    }
    for ((_, p), meta) in store.iter().zip(&header.params) {
        if p.name != meta.name || p.shape != meta.shape {
            return Err(Error::Checkpoint(format!(
                "{}: parameter mismatch: checkpoint {} {:?} vs model {} {:?}",
                path.display(),
                meta.name,
                meta.shape,
                p.name,
                p.shape
            )));
        }
    }
    let total: usize = store.iter().map(|(_, p)| p.value.len()).sum();
    let payload = &body[16 + hlen..];
    if payload.len() != total * 3 * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes, expected {}",
            path.display(),
            payload.len(),
            total * 3 * 8
        )));
    }

    let mut off = 0usize;
    let mut read_block = |len: usize| {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(f64::from_le_bytes(
                payload[off..off + 8].try_into().unwrap(),
            ));
            off += 8;
        }
        out
    };
    let sizes: Vec<usize> = trainer
        .models
        .store
        .iter()
        .map(|(_, p)| p.value.len())
        .collect();
    let ids: Vec<_> = trainer.models.store.iter().map(|(pid, _)| pid).collect();
    for (i, pid) in ids.iter().enumerate() {
        trainer.models.store.get_mut(*pid).value = read_block(sizes[i]);
    }
    for i in 0..sizes.len() {
        trainer.opt.m[i] = read_block(sizes[i]);
    }
    for i in 0..sizes.len() {
        trainer.opt.v[i] = read_block(sizes[i]);
    }
    trainer.opt.t = header.adam_t;
    trainer.step = header.step;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn tiny_config(manifest: &Path, steps: u64) -> Config {
        let overrides = vec![
            ("image_size".to_string(), "16".to_string()),
            ("f".to_string(), "4".to_string()),
            ("channels".to_string(), "4,8".to_string()),
            ("d_z".to_string(), "4".to_string()),
            ("d_t".to_string(), "8".to_string()),
            ("codebook_size".to_string(), "16".to_string()),
            ("transformer_heads".to_string(), "2".to_string()),
            ("text_heads".to_string(), "2".to_string()),
            ("transformer_depth".to_string(), "1".to_string()),
            ("seq_len".to_string(), "8".to_string()),
            ("batch_size".to_string(), "4".to_string()),
            ("steps".to_string(), steps.to_string()),
            ("manifest".to_string(), manifest.display().to_string()),
        ];
        Config::from_sources(None, &overrides).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), 3, 8, 16).unwrap();
        let mut tr = Trainer::new(tiny_config(&manifest, 2)).unwrap();
        tr.run(|_| {}).unwrap();
        let path = dir.path().join("ck.lgvq");
        save(&tr, &path).unwrap();
        let back = load(&path, &[]).unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(back.opt.t, tr.opt.t);
        for (pid, p) in tr.models.store.iter() {
            assert_eq!(p.value, back.models.store.get(pid).value, "{}", p.name);
        }
        assert_eq!(tr.opt.m, back.opt.m);
        assert_eq!(tr.opt.v, back.opt.v);
        assert_eq!(tr.vocab.len(), back.vocab.len());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), 3, 8, 16).unwrap();

        let mut straight = Trainer::new(tiny_config(&manifest, 6)).unwrap();
        let mut straight_metrics = Vec::new();
        straight.run(|m| straight_metrics.push(m.clone())).unwrap();

        let mut first = Trainer::new(tiny_config(&manifest, 6)).unwrap();
        for _ in 0..3 {
            first.train_step().unwrap();
        }
        let path = dir.path().join("mid.lgvq");
        save(&first, &path).unwrap();
        let mut resumed = load(&path, &[]).unwrap();
        assert_eq!(resumed.step, 3);
        let mut resumed_metrics = Vec::new();
        resumed.run(|m| resumed_metrics.push(m.clone())).unwrap();

        assert_eq!(resumed_metrics.len(), 3);
        for (a, b) in straight_metrics[3..].iter().zip(&resumed_metrics) {
            assert_eq!(a.step, b.step);
            assert!(a.total == b.total, "step {}: {} vs {}", a.step, a.total, b.total);
            assert!(a.vq == b.vq && a.gsa == b.gsa && a.mtp == b.mtp && a.ras == b.ras);
        }
        for (pid, p) in straight.models.store.iter() {
            assert_eq!(p.value, resumed.models.store.get(pid).value, "{}", p.name);
        }
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), 3, 8, 16).unwrap();
        let mut tr = Trainer::new(tiny_config(&manifest, 1)).unwrap();
        tr.run(|_| {}).unwrap();
        let path = dir.path().join("ck.lgvq");
        save(&tr, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("corrupted"), "{err}");
    }

    #[test]
    fn wrong_magic_and_wrong_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let garbage = dir.path().join("junk.lgvq");
        std::fs::write(&garbage, b"this is not a checkpoint at all").unwrap();
        let err = load(&garbage, &[]).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"), "{err}");

        // rewrite a valid file with a bumped format tag and a fixed digest
        let manifest = generate_corpus(dir.path(), 3, 8, 16).unwrap();
        let mut tr = Trainer::new(tiny_config(&manifest, 1)).unwrap();
        tr.run(|_| {}).unwrap();
        let path = dir.path().join("ck.lgvq");
        save(&tr, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body_len = bytes.len() - 32;
        let mut patched: Vec<u8> = bytes[..body_len].to_vec();
        let needle = FORMAT.as_bytes();
        let pos = patched
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        patched[pos..pos + FORMAT.len()].copy_from_slice(b"lgvq-ckpt-v9");
        let digest = Sha256::digest(&patched);
        patched.extend_from_slice(&digest);
        std::fs::write(&path, &patched).unwrap();
        let err = load(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("incompatible"), "{err}");
    }

    #[test]
    fn shape_changing_override_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), 3, 8, 16).unwrap();
        let mut tr = Trainer::new(tiny_config(&manifest, 1)).unwrap();
        tr.run(|_| {}).unwrap();
        let path = dir.path().join("ck.lgvq");
        save(&tr, &path).unwrap();
        let err = load(&path, &[("d_z".to_string(), "8".to_string())]).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }
}
