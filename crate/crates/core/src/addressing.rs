//! Memory addressing for a test image: per-patch k-NN search in the
//! aggregated bank, anomaly scores, top-α replacement with averaged raw
//! latents, and decoding of the deep image prior.

use serde::{Deserialize, Serialize};

use crate::bank::{aggregate_feature_map, AggBank, RawBank};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;
use crate::tensor::{Image, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddressingParams {
    pub k: usize,
    pub alpha: f64,
    #[serde(default)]
    pub aligned: bool,
}

impl AddressingParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `1 - cos(a, b)` given precomputed norms.
///
/// Evaluated as `½‖a/|a| − b/|b|‖²`, which equals `1 − cos` but is exactly
/// zero for identical inputs and does not cancel catastrophically near zero.
#[inline]
pub fn distance_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            let (ia, ib) = (1.0 / na, 1.0 / nb);
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 * ia - y as f64 * ib;
                    d * d
                })
                .sum();
            (0.5 * sq).clamp(0.0, 2.0)
        }
    }
}

/// Cosine distance in `[0, 2]`: `0` for identical directions, `1` for
/// orthogonal vectors. `d(0, 0) = 0` and `d(0, v) = 1` for `v != 0`.
pub fn patch_distance(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "patch_distance: length mismatch");
    distance_with_norms(a, b, l2_norm(a), l2_norm(b))
}

/// Bank rows with cached norms and a per-location row index for aligned search.
pub struct BankIndex<'a> {
    agg: &'a AggBank,
    norms: Vec<f64>,
    by_location: Vec<Vec<usize>>,
    p2: usize,
}

impl<'a> BankIndex<'a> {
    pub fn new(agg: &'a AggBank, p1: usize, p2: usize) -> Self {
        let norms = par::map_range(agg.rows(), |j| l2_norm(agg.row(j)));
        let mut by_location = vec![Vec::new(); p1 * p2];
        for (j, o) in agg.origins.iter().enumerate() {
            let (a, b) = (o.p1 as usize, o.p2 as usize);
            if a < p1 && b < p2 {
                by_location[a * p2 + b].push(j);
            }
        }
        BankIndex {
            agg,
            norms,
            by_location,
            p2,
        }
    }

    pub fn candidates_at(&self, p1: usize, p2: usize) -> &[usize] {
        &self.by_location[p1 * self.p2 + p2]
    }

    /// k nearest rows to `query` (ascending distance, then ascending row).
    /// With `location`, only rows from that latent position are considered.
    pub fn knn(&self, query: &[f32], k: usize, location: Option<(usize, usize)>) -> Result<Neighbors> {
        if query.len() != self.agg.cols() {
            return Err(Error::Shape(format!(
                "query has {} values, bank rows have {}",
                query.len(),
                self.agg.cols()
            )));
        }
        let nq = l2_norm(query);
        let mut scored: Vec<(f64, usize)> = match location {
            Some((a, b)) => self
                .candidates_at(a, b)
                .iter()
                .map(|&j| (distance_with_norms(query, self.agg.row(j), nq, self.norms[j]), j))
                .collect(),
            None => (0..self.agg.rows())
                .map(|j| (distance_with_norms(query, self.agg.row(j), nq, self.norms[j]), j))
                .collect(),
        };
        if scored.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k={k} exceeds the {} candidate rows available",
                scored.len()
            )));
        }
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(Neighbors {
            indices: scored.iter().map(|s| s.1).collect(),
            distances: scored.iter().map(|s| s.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// One-shot k-NN query against an aggregated bank.
pub fn knn_query(query: &[f32], agg: &AggBank, k: usize, location: Option<(usize, usize)>) -> Result<Neighbors> {
    let (p1, p2) = grid_extent(agg);
    BankIndex::new(agg, p1, p2).knn(query, k, location)
}

fn grid_extent(agg: &AggBank) -> (usize, usize) {
    let p1 = agg.origins.iter().map(|o| o.p1 as usize + 1).max().unwrap_or(0);
    let p2 = agg.origins.iter().map(|o| o.p2 as usize + 1).max().unwrap_or(0);
    (p1, p2)
}

/// Per-patch anomaly scores, the replacement threshold and the replaced set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub p1: usize,
    pub p2: usize,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub selected: Vec<bool>,
}

impl ScoreMap {
    /// Marks patches with `s > s_alpha`, where `s_alpha` is chosen so that at
    /// most `ceil(alpha · P1 · P2)` patches qualify (exactly that many
    /// unless scores tie at the threshold).
    pub fn from_scores(p1: usize, p2: usize, scores: Vec<f64>, alpha: f64) -> Self {
        let n = scores.len();
        let m = replacement_count(alpha, n);
        let mut sorted = scores.clone();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        let threshold = if n == 0 { 0.0 } else { sorted[m.min(n - 1)] };
        let selected = if m == 0 {
            vec![false; n]
        } else {
            scores.iter().map(|&s| s > threshold).collect()
        };
        ScoreMap {
            p1,
            p2,
            scores,
            threshold,
            selected,
        }
    }

    pub fn replaced(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.p1, self.p2], self.scores.iter().map(|&s| s as f32).collect()).expect("score map dims")
    }

    /// Scores divided by their maximum, bilinearly upsampled to `h × w`.
    pub fn heat_image(&self, h: usize, w: usize) -> Result<Image> {
        let max = self.max_score();
        let data = self
            .scores
            .iter()
            .map(|&s| if max > 0.0 { (s / max) as f32 } else { 0.0 })
            .collect();
        let small = Image::new(self.p1, self.p2, 1, data)?;
        crate::image_io::resize_bilinear(&small, h, w)
    }
}

/// `ceil(alpha · n)` with a guard against representation error (0.3 · 100).
pub fn replacement_count(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    let m = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (m.max(0.0) as usize).min(n)
}

/// Result of addressing every patch of a query feature map.
#[derive(Clone, Debug)]
pub struct Addressed {
    pub neighbors: Vec<Neighbors>,
    pub score: ScoreMap,
}

/// k-NN search for every patch of an aggregated query map (`P1·P2` rows).
pub fn address_patches(
    query_agg: &[f32],
    agg: &AggBank,
    p1: usize,
    p2: usize,
    params: &AddressingParams,
) -> Result<Addressed> {
    params.validate()?;
    let cols = agg.cols();
    if query_agg.len() != p1 * p2 * cols {
        return Err(Error::Shape(format!(
            "aggregated query has {} values, expected {}x{}x{cols}",
            query_agg.len(),
            p1,
            p2
        )));
    }
    let index = BankIndex::new(agg, p1, p2);
    let results = par::map_range(p1 * p2, |q| {
        let loc = params.aligned.then_some((q / p2, q % p2));
        index.knn(&query_agg[q * cols..(q + 1) * cols], params.k, loc)
    });
    let neighbors = results.into_iter().collect::<Result<Vec<_>>>()?;
    let scores = neighbors
        .iter()
        .map(|n| n.distances.iter().sum::<f64>() / params.k as f64)
        .collect();
    Ok(Addressed {
        neighbors,
        score: ScoreMap::from_scores(p1, p2, scores, params.alpha),
    })
}

/// Mean of the k nearest distances at every patch, with the top-α set.
pub fn anomaly_score(
    query_agg: &[f32],
    agg: &AggBank,
    p1: usize,
    p2: usize,
    params: &AddressingParams,
) -> Result<ScoreMap> {
    Ok(address_patches(query_agg, agg, p1, p2, params)?.score)
}

/// `M'(p1, p2, :)` = mean of the raw rows of the k aggregated neighbours.
pub fn retrieve_features(neighbors: &[Neighbors], raw: &RawBank, p1: usize, p2: usize) -> Result<Tensor<f32>> {
    let p3 = raw.dims.p3;
    let mut data = vec![0.0f32; p1 * p2 * p3];
    for (q, n) in neighbors.iter().enumerate() {
        let mut acc = vec![0.0f64; p3];
        for &j in &n.indices {
            for (a, &v) in acc.iter_mut().zip(raw.row(j)) {
                *a += v as f64;
            }
        }
        let k = n.indices.len() as f64;
        for (d, a) in data[q * p3..(q + 1) * p3].iter_mut().zip(acc) {
            *d = (a / k) as f32;
        }
    }
    Tensor::from_vec(&[p1, p2, p3], data)
}

/// Aggregates `feature` and retrieves the averaged raw neighbours per patch.
pub fn retrieve_prior_features(
    feature: &Tensor<f32>,
    raw: &RawBank,
    agg: &AggBank,
    params: &AddressingParams,
) -> Result<Tensor<f32>> {
    let (p1, p2, p3) = feature_dims(feature, raw)?;
    let q = aggregate_feature_map(feature.data(), p1, p2, p3, agg.l);
    let a = address_patches(&q, agg, p1, p2, params)?;
    retrieve_features(&a.neighbors, raw, p1, p2)
}

/// Patchwise select: retrieved latents on the replaced set, originals elsewhere.
pub fn replace_top_alpha(original: &Tensor<f32>, retrieved: &Tensor<f32>, score: &ScoreMap) -> Result<Tensor<f32>> {
    if original.dims() != retrieved.dims() || original.dims().len() != 3 {
        return Err(Error::Shape(format!(
            "feature maps {:?} and {:?} differ",
            original.dims(),
            retrieved.dims()
        )));
    }
    let p3 = original.dims()[2];
    if score.selected.len() * p3 != original.len() {
        return Err(Error::Shape("score map does not match feature map".into()));
    }
    let mut out = original.clone();
    for (q, &sel) in score.selected.iter().enumerate() {
        if sel {
            out.data_mut()[q * p3..(q + 1) * p3].copy_from_slice(&retrieved.data()[q * p3..(q + 1) * p3]);
        }
    }
    Ok(out)
}

fn feature_dims(feature: &Tensor<f32>, raw: &RawBank) -> Result<(usize, usize, usize)> {
    let d = raw.dims;
    if feature.dims() != [d.p1, d.p2, d.p3] {
        return Err(Error::Shape(format!(
            "feature map {:?} does not match bank latent {}x{}x{}",
            feature.dims(),
            d.p1,
            d.p2,
            d.p3
        )));
    }
    Ok((d.p1, d.p2, d.p3))
}

/// Everything produced while retrieving a deep image prior.
#[derive(Clone, Debug)]
pub struct PriorResult {
    pub prior: Image,
    pub score: ScoreMap,
    pub feature: Tensor<f32>,
    pub retrieved: Tensor<f32>,
    pub updated: Tensor<f32>,
}

/// encode → address → retrieve → replace top-α → decode.
pub fn deep_image_prior(
    model: &Model,
    raw: &RawBank,
    agg: &AggBank,
    image: &Image,
    params: &AddressingParams,
) -> Result<PriorResult> {
    if raw.origins != agg.origins {
        return Err(Error::InvalidArgument(
            "raw and aggregated banks are not row-aligned".into(),
        ));
    }
    let feature = model.encode(image)?;
    let (p1, p2, p3) = feature_dims(&feature, raw)?;
    let q = aggregate_feature_map(feature.data(), p1, p2, p3, agg.l);
    let addressed = address_patches(&q, agg, p1, p2, params)?;
    let retrieved = retrieve_features(&addressed.neighbors, raw, p1, p2)?;
    let updated = replace_top_alpha(&feature, &retrieved, &addressed.score)?;
    let prior = model.decode(&updated)?;
    Ok(PriorResult {
        prior,
        score: addressed.score,
        feature,
        retrieved,
        updated,
    })
}
