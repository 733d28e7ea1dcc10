//! Dataset ingestion and the built-in synthetic corpus.
//!
//! A dataset is described by a line-delimited manifest; each line is a JSON
//! object `{"image": "path", "captions": ["...", ...]}` with the image path
//! resolved relative to the manifest file. Images are decoded, resized to
//! the configured square resolution, and held in memory as CHW f64 grids in
//! [0, 1] — corpora here are desk-scale by design.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngs::{derive, Stream};
use crate::text::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
}

#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    /// Decoded images, CHW layout `[3 * size * size]`, aligned with records.
    pub images: Vec<Vec<f64>>,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every caption in record order (used to build corpus vocabularies).
    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| r.captions.iter().map(String::as_str))
    }

    /// Vocabulary of every distinct caption word, sorted for determinism.
    pub fn build_vocabulary(&self) -> Result<Vocabulary> {
        let mut words = BTreeSet::new();
        for c in self.all_captions() {
            for w in Vocabulary::words_of(c) {
                words.insert(w);
            }
        }
        Vocabulary::new(&words.into_iter().collect::<Vec<_>>())
    }
}

/// Read a manifest and decode every referenced image.
pub fn load_dataset(manifest: &Path, image_size: usize) -> Result<Dataset> {
    let file = std::fs::File::open(manifest)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "manifest {} line {}: {e}",
                manifest.display(),
                lineno + 1
            ))
        })?;
        if rec.captions.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} line {}: record has no captions",
                manifest.display(),
                lineno + 1
            )));
        }
        let path = base.join(&rec.image);
        images.push(load_image(&path, image_size)?);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} contains no records",
            manifest.display()
        )));
    }
    Ok(Dataset {
        records,
        images,
        image_size,
    })
}

/// Decode an image file to CHW f64 in [0, 1], bilinearly resized to
/// `size`×`size` unless it already has that exact shape.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("image {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    let mut out = vec![0.0; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * size * size + y as usize * size + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Write a square CHW f64 image in [0, 1] as an 8-bit PNG.
pub fn save_image(pixels: &[f64], size: usize, path: &Path) -> Result<()> {
    save_image_rect(pixels, size, size, path)
}

/// Write a CHW f64 image of `width`×`height` in [0, 1] as an 8-bit PNG.
pub fn save_image_rect(pixels: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    assert_eq!(pixels.len(), 3 * width * height, "save_image_rect: buffer size");
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let mut rgb = [0u8; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let p = pixels[c * width * height + y as usize * width + x as usize];
            *v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(rgb)
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("purple", [0.6, 0.15, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.5, 0.5, 0.5]),
];

const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

/// Procedural image–caption corpus: one colored shape per image on a dark
/// background, captioned by its color and shape ("a red square"). At most 32
/// distinct color/shape combinations exist.
pub fn generate_corpus(dir: &Path, seed: u64, count: usize, image_size: usize) -> Result<PathBuf> {
    assert!(count <= COLORS.len() * SHAPES.len(), "corpus caps at 32 unique pairs");
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut rng = derive(seed, Stream::Synthetic, 0);
    let mut manifest = String::new();
    for i in 0..count {
        let (color_name, rgb) = COLORS[i % COLORS.len()];
        let shape = SHAPES[(i / COLORS.len()) % SHAPES.len()];
        let pixels = draw_shape(image_size, shape, rgb, &mut rng);
        let rel = format!("images/{i:03}.png");
        save_image(&pixels, image_size, &dir.join(&rel))?;
        let caption = format!("a {color_name} {shape}");
        let rec = ManifestRecord {
            image: rel,
            captions: vec![caption],
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

fn draw_shape(
    size: usize,
    shape: &str,
    rgb: [f64; 3],
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<f64> {
    let bg = 0.08;
    let mut px = vec![bg; 3 * size * size];
    let jitter = (size / 16) as i64;
    let cx = size as i64 / 2 + rng.gen_range(-jitter..=jitter);
    let cy = size as i64 / 2 + rng.gen_range(-jitter..=jitter);
    let r = rng.gen_range(size as i64 / 4..=size as i64 / 3);
    let inside = |x: i64, y: i64| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match shape {
            "square" => dx.abs() <= r && dy.abs() <= r,
            "circle" => dx * dx + dy * dy <= r * r,
            "triangle" => {
                // upright triangle: apex at (cx, cy - r), base at cy + r
                let t = (y - (cy - r)) as f64 / (2 * r) as f64;
                (0.0..=1.0).contains(&t) && (dx.abs() as f64) <= t * r as f64
            }
            "cross" => (dx.abs() <= r / 3 && dy.abs() <= r) || (dy.abs() <= r / 3 && dx.abs() <= r),
            _ => unreachable!("unknown shape {shape}"),
        }
    };
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            if inside(x, y) {
                for c in 0..3 {
                    px[c as usize * size * size + y as usize * size + x as usize] = rgb[c];
                }
            }
        }
    }
    px
}
