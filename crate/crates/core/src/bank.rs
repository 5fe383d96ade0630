//! Raw and aggregated patch-latent memory banks, greedy coreset reduction,
//! and the bank file format.
//!
//! Both banks are matricized: one row per patch, rows ordered image-major
//! then `p1` then `p2`, with a side table mapping each row back to its
//! `(image, p1, p2)` origin. The two banks are always row-aligned.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;
use crate::tensor::{read_exact, read_u32, Image, Tensor};

pub const BANK_MAGIC: &[u8; 4] = b"PAEB";
pub const BANK_VERSION: u32 = 1;

/// Origin of one bank row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowOrigin {
    pub image: u32,
    pub p1: u32,
    pub p2: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankDims {
    pub images: usize,
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawBank {
    pub dims: BankDims,
    /// `rows × P3`.
    pub matrix: Tensor<f32>,
    pub origins: Vec<RowOrigin>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggBank {
    pub l: usize,
    /// `rows × (P3 · w²)` with `w = 2⌊l/2⌋ + 1`.
    pub matrix: Tensor<f32>,
    pub origins: Vec<RowOrigin>,
}

/// Window side for aggregation length `l`.
pub fn window_side(l: usize) -> usize {
    2 * (l / 2) + 1
}

impl RawBank {
    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn row(&self, j: usize) -> &[f32] {
        let d = self.dims.p3;
        &self.matrix.data()[j * d..(j + 1) * d]
    }
}

impl AggBank {
    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn cols(&self) -> usize {
        self.matrix.dims()[1]
    }

    pub fn row(&self, j: usize) -> &[f32] {
        let d = self.cols();
        &self.matrix.data()[j * d..(j + 1) * d]
    }
}

/// Encodes every image and stacks the patch latents.
pub fn build_raw_bank(model: &Model, images: &[Image]) -> Result<RawBank> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot build a bank from zero images".into()));
    }
    let maps = par::map_slice(images, |img| model.encode(img));
    let (p1, p2, p3) = model.arch().latent_dims();
    let mut data = Vec::with_capacity(images.len() * p1 * p2 * p3);
    let mut origins = Vec::with_capacity(images.len() * p1 * p2);
    for (i, fm) in maps.into_iter().enumerate() {
        data.extend_from_slice(fm?.data());
        for a in 0..p1 {
            for b in 0..p2 {
                origins.push(RowOrigin {
                    image: i as u32,
                    p1: a as u32,
                    p2: b as u32,
                });
            }
        }
    }
    Ok(RawBank {
        dims: BankDims {
            images: images.len(),
            p1,
            p2,
            p3,
        },
        matrix: Tensor::from_vec(&[origins.len(), p3], data)?,
        origins,
    })
}

pub fn validate_l(l: usize, p1: usize, p2: usize) -> Result<()> {
    if l.is_multiple_of(2) || l == 0 {
        return Err(Error::InvalidArgument(format!("aggregation length l={l} must be odd")));
    }
    if l > (2 * p1 - 1).min(2 * p2 - 1) {
        return Err(Error::InvalidArgument(format!(
            "aggregation length l={l} exceeds latent grid {p1}x{p2}"
        )));
    }
    Ok(())
}

/// Aggregates a `P1 × P2 × P3` feature map: row `(p1, p2)` is the row-major
/// vectorization of the `w × w × P3` window centred there, zero-filled
/// outside the map. Output is `(P1·P2) × (P3·w²)`.
pub fn aggregate_feature_map(fm: &[f32], p1: usize, p2: usize, p3: usize, l: usize) -> Vec<f32> {
    let w = window_side(l);
    let r = (l / 2) as isize;
    let cols = p3 * w * w;
    let mut out = vec![0.0f32; p1 * p2 * cols];
    for a in 0..p1 {
        for b in 0..p2 {
            let row = &mut out[(a * p2 + b) * cols..][..cols];
            for dy in 0..w {
                let y = a as isize + dy as isize - r;
                if y < 0 || y >= p1 as isize {
                    continue;
                }
                for dx in 0..w {
                    let x = b as isize + dx as isize - r;
                    if x < 0 || x >= p2 as isize {
                        continue;
                    }
                    let src = &fm[(y as usize * p2 + x as usize) * p3..][..p3];
                    row[(dy * w + dx) * p3..][..p3].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Builds the aggregated bank row-aligned with a full (unsubsampled) raw bank.
pub fn build_agg_bank(raw: &RawBank, l: usize) -> Result<AggBank> {
    let BankDims { images, p1, p2, p3 } = raw.dims;
    validate_l(l, p1, p2)?;
    if raw.rows() != images * p1 * p2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs the full raw bank ({} rows), got {}",
            images * p1 * p2,
            raw.rows()
        )));
    }
    let block = p1 * p2 * p3;
    let blocks = par::map_range(images, |i| {
        aggregate_feature_map(&raw.matrix.data()[i * block..(i + 1) * block], p1, p2, p3, l)
    });
    let cols = p3 * window_side(l).pow(2);
    let data: Vec<f32> = blocks.concat();
    Ok(AggBank {
        l,
        matrix: Tensor::from_vec(&[raw.rows(), cols], data)?,
        origins: raw.origins.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetConfig {
    pub size: usize,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_projection_dim() -> usize {
    128
}

impl CoresetConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        CoresetConfig {
            size,
            projection_dim: default_projection_dim(),
            seed,
        }
    }
}

/// Random Gaussian projection with entries `N(0, 1/dim)`; the identity when
/// the rows are already at most `dim` wide. Returns `rows × out_dim`.
pub fn project_rows(matrix: &[f32], rows: usize, cols: usize, dim: usize, seed: u64) -> (Vec<f32>, usize) {
    if cols <= dim {
        return (matrix.to_vec(), cols);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, (1.0 / dim as f32).sqrt()).expect("valid normal");
    // stored cols × dim so each input coordinate scales one contiguous row
    let psi: Vec<f32> = (0..cols * dim).map(|_| normal.sample(&mut rng)).collect();
    let out = par::map_range(rows, |r| {
        let src = &matrix[r * cols..(r + 1) * cols];
        let mut acc = vec![0.0f32; dim];
        for (c, &v) in src.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (a, &p) in acc.iter_mut().zip(&psi[c * dim..(c + 1) * dim]) {
                *a += v * p;
            }
        }
        acc
    });
    (out.concat(), dim)
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Greedy k-center selection over `points` (`n × dim`) starting from `first`.
/// Each step takes the point whose minimum distance to the selected set is
/// largest, lowest index on ties. Returns indices in selection order.
pub fn greedy_k_center(points: &[f32], n: usize, dim: usize, count: usize, first: usize) -> Vec<usize> {
    let mut selected = Vec::with_capacity(count);
    if count == 0 {
        return selected;
    }
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut next = first;
    loop {
        selected.push(next);
        taken[next] = true;
        if selected.len() == count {
            break;
        }
        let c = &points[next * dim..(next + 1) * dim];
        let dists = par::map_range(n, |j| squared_distance(&points[j * dim..(j + 1) * dim], c));
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if dists[j] < min_d[j] {
                min_d[j] = dists[j];
            }
            if !taken[j] && min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        next = best;
    }
    selected
}

/// Index of the seeded uniformly random first pick.
pub fn coreset_first_pick(rows: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0c0d_e5e7).gen_range(0..rows)
}

fn take_rows(matrix: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let cols = matrix.dims()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&matrix.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_vec(&[rows.len(), cols], data).expect("non-empty selection")
}

/// Reduces both banks to the same greedy coreset of `cfg.size` rows, chosen
/// in the projected aggregated space.
pub fn coreset_subsample(agg: &AggBank, raw: &RawBank, cfg: &CoresetConfig) -> Result<(AggBank, RawBank, Vec<usize>)> {
    if agg.origins != raw.origins {
        return Err(Error::InvalidArgument(
            "raw and aggregated banks are not row-aligned".into(),
        ));
    }
    let rows = agg.rows();
    if cfg.size == 0 || cfg.size > rows {
        return Err(Error::InvalidArgument(format!(
            "coreset size {} must be in 1..={rows}",
            cfg.size
        )));
    }
    if cfg.projection_dim == 0 {
        return Err(Error::InvalidArgument("projection dimension must be positive".into()));
    }
    let (proj, dim) = project_rows(agg.matrix.data(), rows, agg.cols(), cfg.projection_dim, cfg.seed);
    let first = coreset_first_pick(rows, cfg.seed);
    let sel = greedy_k_center(&proj, rows, dim, cfg.size, first);
    let origins: Vec<RowOrigin> = sel.iter().map(|&j| agg.origins[j]).collect();
    Ok((
        AggBank {
            l: agg.l,
            matrix: take_rows(&agg.matrix, &sel),
            origins: origins.clone(),
        },
        RawBank {
            dims: raw.dims,
            matrix: take_rows(&raw.matrix, &sel),
            origins,
        },
        sel,
    ))
}

pub fn write_bank<W: Write>(raw: &RawBank, agg: &AggBank, w: &mut W) -> std::io::Result<()> {
    let d = raw.dims;
    w.write_all(BANK_MAGIC)?;
    w.write_all(&BANK_VERSION.to_le_bytes())?;
    for v in [d.images, d.p1, d.p2, d.p3, agg.l, raw.rows()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut side = Vec::with_capacity(raw.rows() * 12);
    for o in &raw.origins {
        for v in [o.image, o.p1, o.p2] {
            side.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&side)?;
    raw.matrix.write_to(w)?;
    agg.matrix.write_to(w)
}

pub fn read_bank<R: Read>(r: &mut R) -> Result<(RawBank, AggBank)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "bank magic")?;
    if &magic != BANK_MAGIC {
        return Err(Error::Corrupt(format!("bad bank magic {magic:?}")));
    }
    let version = read_u32(r, "bank version")?;
    if version != BANK_VERSION {
        return Err(Error::Corrupt(format!("unsupported bank version {version}")));
    }
    let mut h = [0usize; 6];
    for v in &mut h {
        *v = read_u32(r, "bank header")? as usize;
    }
    let [images, p1, p2, p3, l, rows] = h;
    let dims = BankDims { images, p1, p2, p3 };
    if rows == 0 || rows > images * p1 * p2 {
        return Err(Error::Corrupt(format!(
            "bank row count {rows} inconsistent with header"
        )));
    }
    validate_l(l, p1, p2).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut side = vec![0u8; rows * 12];
    read_exact(r, &mut side, "bank side table")?;
    let origins: Vec<RowOrigin> = side
        .chunks_exact(12)
        .map(|c| RowOrigin {
            image: u32::from_le_bytes(c[0..4].try_into().unwrap()),
            p1: u32::from_le_bytes(c[4..8].try_into().unwrap()),
            p2: u32::from_le_bytes(c[8..12].try_into().unwrap()),
        })
        .collect();
    if origins
        .iter()
        .any(|o| o.image as usize >= images || o.p1 as usize >= p1 || o.p2 as usize >= p2)
    {
        return Err(Error::Corrupt("bank side table entry out of range".into()));
    }
    let raw_m = Tensor::read_from(r)?;
    let agg_m = Tensor::read_from(r)?;
    let cols = p3 * window_side(l).pow(2);
    if raw_m.dims() != [rows, p3] || agg_m.dims() != [rows, cols] {
        return Err(Error::Corrupt(format!(
            "bank matrices {:?}/{:?} do not match header",
            raw_m.dims(),
            agg_m.dims()
        )));
    }
    Ok((
        RawBank {
            dims,
            matrix: raw_m,
            origins: origins.clone(),
        },
        AggBank {
            l,
            matrix: agg_m,
            origins,
        },
    ))
}

pub fn save_bank(raw: &RawBank, agg: &AggBank, path: impl AsRef<Path>) -> Result<()> {
    if raw.origins != agg.origins {
        return Err(Error::InvalidArgument(
            "raw and aggregated banks are not row-aligned".into(),
        ));
    }
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_bank(raw, agg, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<(RawBank, AggBank)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let banks = read_bank(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corrupt("trailing bytes after bank".into()));
    }
    Ok(banks)
}
