//! Visual diagnostics for a trained model: per-code decoded images, the
//! word-similarity and matched-code-similarity matrices, and the codebook
//! usage histogram. Each diagnostic is written both as a plain data file
//! (tab-separated, parseable back bit-exactly) and as a rendered image.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::align::cosine;
use crate::config::Config;
use crate::data::{save_image, save_image_rect};
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::model::Models;
use crate::relation::{content_positions, match_word_to_code};
use crate::tensor::Tape;

/// Decode every codebook entry as a 1×1 code grid into an f×f patch, writing
/// one file per entry plus a row-major tiled overview. Perfect-square K
/// tiles √K × √K; otherwise the near-square rectangle with ceil(√K) columns.
/// Returns the per-entry paths and the grid path.
pub fn dump_codebook_images(
    models: &Models,
    cfg: &Config,
    dir: &Path,
) -> Result<(Vec<PathBuf>, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let k = cfg.codebook_size;
    let f = cfg.f;
    let code = models.store.get(models.codebook).value.clone();
    let mut t = Tape::new();
    let z = t.constant(&[k, cfg.d_z, 1, 1], code);
    let y = models.decoder.forward(&mut t, &models.store, z);
    let vals = t.value(y);
    let patch_len = 3 * f * f;

    let mut paths = Vec::with_capacity(k);
    for i in 0..k {
        let patch: Vec<f64> = vals[i * patch_len..(i + 1) * patch_len]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let p = dir.join(format!("code_{i:04}.png"));
        save_image(&patch, f, &p)?;
        paths.push(p);
    }

    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (w, h) = (cols * f, rows * f);
    let mut grid = vec![0.0; 3 * w * h];
    for i in 0..k {
        let (gr, gc) = (i / cols, i % cols);
        for c in 0..3 {
            for py in 0..f {
                for px in 0..f {
                    let v = vals[i * patch_len + c * f * f + py * f + px].clamp(0.0, 1.0);
                    grid[c * w * h + (gr * f + py) * w + (gc * f + px)] = v;
                }
            }
        }
    }
    let grid_path = dir.join("codebook_grid.png");
    save_image_rect(&grid, w, h, &grid_path)?;
    Ok((paths, grid_path))
}

/// Everything `write_diagnostics` produces.
pub struct DiagFiles {
    pub words: Vec<String>,
    pub word_matrix: PathBuf,
    pub word_heatmap: PathBuf,
    pub code_matrix: PathBuf,
    pub code_heatmap: PathBuf,
    pub histogram: PathBuf,
    pub histogram_image: PathBuf,
}

/// Word-similarity matrix, matched-code-similarity matrix, and usage
/// histogram for the evaluator's dataset, written under `dir`.
///
/// The word set is every distinct content word across caption 0 of each
/// record (sorted). Each word is matched to a code on the first record whose
/// caption contains it, and the matched code's embedding represents the word
/// on the code side.
pub fn write_diagnostics(ev: &Evaluator, dir: &Path) -> Result<DiagFiles> {
    std::fs::create_dir_all(dir)?;
    let d_t = ev.cfg.d_t;
    let d_z = ev.cfg.d_z;

    // word → first record whose caption 0 contains it
    let mut first_rec: BTreeMap<String, usize> = BTreeMap::new();
    for (ri, rec) in ev.dataset.records.iter().enumerate() {
        let tokens = ev.vocab.tokenize(&rec.captions[0], ev.cfg.seq_len);
        for p in content_positions(&tokens, ev.vocab) {
            first_rec
                .entry(ev.vocab.token(tokens[p]).to_string())
                .or_insert(ri);
        }
    }
    if first_rec.is_empty() {
        return Err(Error::Data(
            "diagnostics need at least one content word in the captions".to_string(),
        ));
    }
    let words: Vec<String> = first_rec.keys().cloned().collect();

    // per-record code indices / representation, computed once
    let mut cache: HashMap<usize, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let codebook = ev.models.store.get(ev.models.codebook).value.clone();
    let mut wvecs = Vec::with_capacity(words.len());
    let mut cvecs = Vec::with_capacity(words.len());
    for w in &words {
        let ri = first_rec[w];
        let (indices, lifted) = cache.entry(ri).or_insert_with(|| {
            let indices = ev.encode_indices(&ev.dataset.images[ri]);
            let lifted = ev.code_lift(&indices);
            (indices, lifted)
        });
        let id = ev.vocab.id(w).expect("corpus word is in the vocabulary");
        let wv = ev.text_enc.word(id, w);
        let pos = match_word_to_code(&wv, lifted, d_t);
        let code_id = indices[pos];
        cvecs.push(codebook[code_id * d_z..(code_id + 1) * d_z].to_vec());
        wvecs.push(wv);
    }

    let word_m = similarity_matrix(&wvecs);
    let code_m = similarity_matrix(&cvecs);

    let word_matrix = dir.join("word_similarity.tsv");
    let code_matrix = dir.join("code_similarity.tsv");
    write_matrix_tsv(&word_matrix, &words, &word_m)?;
    write_matrix_tsv(&code_matrix, &words, &code_m)?;
    let word_heatmap = dir.join("word_similarity.png");
    let code_heatmap = dir.join("code_similarity.png");
    write_heatmap(&word_heatmap, &word_m)?;
    write_heatmap(&code_heatmap, &code_m)?;

    // usage over the full dataset
    let mut counts = vec![0u64; ev.cfg.codebook_size];
    for ri in 0..ev.dataset.len() {
        let indices = match cache.get(&ri) {
            Some((idx, _)) => idx.clone(),
            None => ev.encode_indices(&ev.dataset.images[ri]),
        };
        for i in indices {
            counts[i] += 1;
        }
    }
    let histogram = dir.join("usage_histogram.tsv");
    write_histogram_tsv(&histogram, &counts)?;
    let histogram_image = dir.join("usage_histogram.png");
    write_histogram_image(&histogram_image, &counts)?;

    Ok(DiagFiles {
        words,
        word_matrix,
        word_heatmap,
        code_matrix,
        code_heatmap,
        histogram,
        histogram_image,
    })
}

fn similarity_matrix(vecs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vecs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = cosine(&vecs[i], &vecs[j]);
        }
    }
    m
}

/// Header row carries the labels; each data row starts with its label.
/// Values use the shortest representation that parses back to the same f64.
fn write_matrix_tsv(path: &Path, labels: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("label");
    for l in labels {
        out.push('\t');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in &m[i] {
            out.push('\t');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a matrix written by `write_matrix_tsv` back into labels + values.
pub fn parse_matrix_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("matrix {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("matrix {}: empty file", path.display())))?;
    let labels: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut m = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut cells = line.split('\t');
        let _row_label = cells.next();
        let row: std::result::Result<Vec<f64>, _> = cells.map(str::parse::<f64>).collect();
        let row = row.map_err(|e| {
            Error::Data(format!("matrix {} row {}: {e}", path.display(), ln + 2))
        })?;
        if row.len() != labels.len() {
            return Err(Error::Data(format!(
                "matrix {} row {}: {} values for {} labels",
                path.display(),
                ln + 2,
                row.len(),
                labels.len()
            )));
        }
        m.push(row);
    }
    if m.len() != labels.len() {
        return Err(Error::Data(format!(
            "matrix {}: {} rows for {} labels",
            path.display(),
            m.len(),
            labels.len()
        )));
    }
    Ok((labels, m))
}

/// Similarity in [-1, 1] rendered as grayscale (−1 black, +1 white),
/// one 16×16 block per cell.
fn write_heatmap(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    const CELL: usize = 16;
    let n = m.len();
    let side = n * CELL;
    let mut px = vec![0.0; 3 * side * side];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let g = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
            for c in 0..3 {
                for y in 0..CELL {
                    for x in 0..CELL {
                        px[c * side * side + (i * CELL + y) * side + (j * CELL + x)] = g;
                    }
                }
            }
        }
    }
    save_image_rect(&px, side, side, path)
}

fn write_histogram_tsv(path: &Path, counts: &[u64]) -> Result<()> {
    let mut out = String::from("code\tcount\n");
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!("{i}\t{c}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_histogram_tsv(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("histogram {}: {e}", path.display())))?;
    let mut counts = Vec::new();
    for (ln, line) in text.lines().skip(1).enumerate() {
        let (code, count) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("histogram {} row {}: no tab", path.display(), ln + 2))
        })?;
        let code: usize = code.parse().map_err(|e| {
            Error::Data(format!("histogram {} row {}: {e}", path.display(), ln + 2))
        })?;
        if code != counts.len() {
            return Err(Error::Data(format!(
                "histogram {} row {}: expected code {}, found {code}",
                path.display(),
                ln + 2,
                counts.len()
            )));
        }
        counts.push(count.parse().map_err(|e| {
            Error::Data(format!("histogram {} row {}: {e}", path.display(), ln + 2))
        })?);
    }
    Ok(counts)
}

/// White bars on black, 4 px per code, 64 px tall, scaled to the peak count.
fn write_histogram_image(path: &Path, counts: &[u64]) -> Result<()> {
    const BAR: usize = 4;
    const HEIGHT: usize = 64;
    let w = counts.len() * BAR;
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut px = vec![0.0; 3 * w * HEIGHT];
    for (i, &c) in counts.iter().enumerate() {
        let bar_h = ((c as f64 / peak as f64) * HEIGHT as f64).round() as usize;
        for y in HEIGHT - bar_h..HEIGHT {
            for x in i * BAR..(i + 1) * BAR {
                for ch in 0..3 {
                    px[ch * w * HEIGHT + y * w + x] = 1.0;
                }
            }
        }
    }
    save_image_rect(&px, w, HEIGHT, path)
}
