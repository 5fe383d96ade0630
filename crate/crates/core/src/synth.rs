//! Seeded procedural corpora: textured clean backgrounds and crack-like
//! additive defects with exact ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{load_image, save_image, save_mask_png};
use crate::par;
use crate::tensor::{read_tensor, write_tensor, Image, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Grain,
    Blotch,
}

/// Inclusive ranges that each defect draws from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    pub strokes: [usize; 2],
    pub width: [usize; 2],
    pub offset: [f64; 2],
    pub fraction: [f64; 2],
}

impl Default for DefectConfig {
    fn default() -> Self {
        DefectConfig {
            strokes: [1, 3],
            width: [1, 4],
            offset: [0.3, 0.7],
            fraction: [0.001, 0.05],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub style: Style,
    pub image_size: usize,
    pub defect: DefectConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            style: Style::Grain,
            image_size: 64,
            defect: DefectConfig::default(),
        }
    }
}

fn range_ok<T: PartialOrd + Copy>(r: [T; 2], lo: T, hi: T) -> bool {
    lo <= r[0] && r[0] <= r[1] && r[1] <= hi
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.defect;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("synth: {what}")));
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if !range_ok(d.strokes, 1, 3) {
            return bad("strokes must lie within [1, 3]");
        }
        if !range_ok(d.width, 1, 4) {
            return bad("width must lie within [1, 4]");
        }
        if !range_ok(d.offset, 0.3, 0.7) {
            return bad("offset must lie within [0.3, 0.7]");
        }
        if !range_ok(d.fraction, 0.001, 0.05) {
            return bad("fraction must lie within [0.001, 0.05]");
        }
        Ok(())
    }
}

// ChaCha stream ids: 0 for product-level structure, then two per image.
fn product_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn background_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + 2 * index);
    rng
}

fn defect_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + 2 * index);
    rng
}

/// Lowest and highest 8-bit levels inside `[0.1, 0.9]`.
const LEVEL_LO: f64 = 26.0;
const GRAIN_NOISE: f64 = 0.35;
const LEVEL_HI: f64 = 229.0;

fn box_blur(src: &[f64], n: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for d in -(r as isize)..=r as isize {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).rem_euclid(n as isize))
                    } else {
                        ((y as isize + d).rem_euclid(n as isize), x as isize)
                    };
                    acc += src[yy as usize * n + xx as usize];
                }
                out[y * n + x] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn unit_std(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in &mut v {
        *a = if sd > 0.0 { (*a - mean) / sd } else { 0.0 };
    }
    v
}

/// Min-max rescale onto the 8-bit levels inside `[0.1, 0.9]`.
fn rescale_quantized(v: &[f64], n: usize) -> Image {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = v
        .iter()
        .map(|&a| {
            let level = (LEVEL_LO + (a - lo) / span * (LEVEL_HI - LEVEL_LO)).round();
            (level / 255.0) as f32
        })
        .collect();
    Image::new(n, n, 1, data).expect("square grayscale image")
}

/// Clean background number `index` of the product described by `cfg`.
///
/// Grain: a sinusoid whose orientation is fixed per product and whose
/// period and phase are drawn per image, plus a smoothed noise field. Blotch: a sum
/// of Gaussian blobs placed per image. Both are rescaled to `[0.1, 0.9]`
/// and quantized to 8 bits.
pub fn gen_background(cfg: &SynthConfig, index: u64) -> Result<Image> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut rng = background_rng(cfg.seed, index);
    let values = match cfg.style {
        Style::Grain => {
            let theta: f64 = product_rng(cfg.seed).gen_range(0.0..PI);
            let period: f64 = rng.gen_range(8.0..16.0);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = unit_std(box_blur(&white, n, 1));
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    (2.0 * PI * (x * c + y * s) / period + phase).sin() + GRAIN_NOISE * noise[i]
                })
                .collect::<Vec<f64>>()
        }
        Style::Blotch => {
            let count = rng.gen_range(6..=12);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.gen_range(0.0..n as f64),
                        rng.gen_range(0.0..n as f64),
                        rng.gen_range(n as f64 / 16.0..n as f64 / 5.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    blobs
                        .iter()
                        .map(|&(by, bx, r, a)| a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * r * r)).exp())
                        .sum()
                })
                .collect()
        }
    };
    Ok(rescale_quantized(&values, n))
}

fn segment_distance(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((py - a.0 - t * dy).powi(2) + (px - a.1 - t * dx).powi(2)).sqrt()
}

/// A defective image with its mask and true defect image.
#[derive(Clone, Debug)]
pub struct Defect {
    pub image: Image,
    pub mask: Mask,
    /// `image − background`, `H × W × 1`.
    pub truth: Tensor<f32>,
}

const MAX_RETRIES: usize = 10;

/// Adds random-walk crack strokes to a single-channel background. Strokes
/// brighten or darken by a seeded offset and the result is clamped and
/// quantized to 8 bits. The mask is exactly the set of changed pixels. A
/// draw whose defect fraction misses the configured bounds is regenerated.
pub fn inject_defect(bg: &Image, cfg: &SynthConfig, index: u64) -> Result<Defect> {
    cfg.validate()?;
    if bg.channels() != 1 {
        return Err(Error::Shape("defect injection expects a grayscale background".into()));
    }
    let (h, w) = (bg.height(), bg.width());
    let d = &cfg.defect;
    let mut rng = defect_rng(cfg.seed, index);
    let total = (h * w) as f64;
    for _ in 0..MAX_RETRIES {
        let target = rng.gen_range(d.fraction[0]..=d.fraction[1]) * total;
        let strokes = rng.gen_range(d.strokes[0]..=d.strokes[1]);
        let mut offset = vec![0.0f64; h * w];
        for _ in 0..strokes {
            let width = rng.gen_range(d.width[0]..=d.width[1]) as f64;
            let magnitude = rng.gen_range(d.offset[0]..=d.offset[1]);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let length = (target / strokes as f64 / width).max(2.0);
            let mut p = (rng.gen_range(0.2..0.8) * h as f64, rng.gen_range(0.2..0.8) * w as f64);
            let mut heading: f64 = rng.gen_range(0.0..2.0 * PI);
            let mut points = vec![p];
            let mut walked = 0.0;
            while walked < length {
                heading += rng.gen_range(-0.5..0.5);
                let step = 2.0f64.min(length - walked).max(0.5);
                p = (
                    (p.0 + step * heading.sin()).clamp(0.0, (h - 1) as f64),
                    (p.1 + step * heading.cos()).clamp(0.0, (w - 1) as f64),
                );
                points.push(p);
                walked += step;
            }
            let radius = width / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y as f64, x as f64);
                    let hit = points
                        .windows(2)
                        .any(|s| segment_distance(py, px, s[0], s[1]) <= radius);
                    if hit {
                        offset[y * w + x] = sign * magnitude;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(h * w);
        let mut truth = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for (i, &b) in bg.data().iter().enumerate() {
            let v = ((b as f64 + offset[i]).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            let v = v as f32;
            data.push(v);
            truth.push(v - b);
            mask.push(v != b);
        }
        let fraction = mask.iter().filter(|&&m| m).count() as f64 / total;
        if fraction >= d.fraction[0] && fraction <= d.fraction[1] {
            return Ok(Defect {
                image: Image::new(h, w, 1, data)?,
                mask: Mask::new(h, w, mask)?,
                truth: Tensor::from_vec(&[h, w, 1], truth)?,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "defect fraction outside [{}, {}] after {MAX_RETRIES} attempts",
        d.fraction[0], d.fraction[1]
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub style: Style,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub defect: DefectConfig,
}

impl CorpusManifest {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            style: self.style,
            image_size: self.image_size,
            defect: self.defect,
        }
    }
}

pub fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes `train/`, `test/`, `truth/`, `truth_s/` and `manifest.json` under
/// `dir`. Training images use background indices `0..n_train`, test images
/// the following `n_test`.
pub fn gen_corpus(cfg: &SynthConfig, n_train: usize, n_test: usize, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for sub in ["train", "test", "truth", "truth_s"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    par::map_range(n_train, |i| {
        let img = gen_background(cfg, i as u64)?;
        save_image(&img, dir.join("train").join(format!("{}.png", sample_name(i))))
    })
    .into_iter()
    .collect::<Result<()>>()?;
    par::map_range(n_test, |i| {
        let index = (n_train + i) as u64;
        let bg = gen_background(cfg, index)?;
        let d = inject_defect(&bg, cfg, index)?;
        let name = sample_name(i);
        save_image(&d.image, dir.join("test").join(format!("{name}.png")))?;
        save_mask_png(
            d.mask.data(),
            d.mask.height(),
            d.mask.width(),
            dir.join("truth").join(format!("{name}.png")),
        )?;
        write_tensor(&d.truth, dir.join("truth_s").join(format!("{name}.ptf")))
    })
    .into_iter()
    .collect::<Result<()>>()?;
    let manifest = CorpusManifest {
        seed: cfg.seed,
        style: cfg.style,
        n_train,
        n_test,
        image_size: cfg.image_size,
        defect: cfg.defect,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug)]
pub struct TestSample {
    pub name: String,
    pub image: Image,
    pub mask: Mask,
    pub truth: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<Image>,
    pub test: Vec<TestSample>,
}

/// Loads a corpus written by [`gen_corpus`].
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let train = par::map_range(manifest.n_train, |i| {
        load_image(dir.join("train").join(format!("{}.png", sample_name(i))))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let test = par::map_range(manifest.n_test, |i| {
        let name = sample_name(i);
        let image = load_image(dir.join("test").join(format!("{name}.png")))?;
        let mask = Mask::from_image(&load_image(dir.join("truth").join(format!("{name}.png")))?)?;
        let truth = read_tensor(dir.join("truth_s").join(format!("{name}.ptf")))?;
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!("mask for {name} does not match its image")));
        }
        Ok(TestSample {
            name,
            image,
            mask,
            truth,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, train, test })
}
