//! Segmentation metrics, threshold selection and tuning-parameter search.

use serde::{Deserialize, Serialize};

use crate::addressing::{deep_image_prior, AddressingParams};
use crate::bank::{AggBank, RawBank};
use crate::decomposition::{decompose, DecompParams};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;
use crate::tensor::{Image, Mask, Tensor};

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    same_dims(pred, truth)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Rank-based AUROC (Mann–Whitney U) with ties counted as one half.
pub fn pixel_auroc(scores: &[f64], truth: &Mask) -> Result<f64> {
    if scores.len() != truth.data().len() {
        return Err(Error::Shape(format!(
            "{} scores for a mask of {} pixels",
            scores.len(),
            truth.data().len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("AUROC scores contain NaN".into()));
    }
    let pos = truth.count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both defect and normal pixels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of positive pixels.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let hits = order[i..=j].iter().filter(|&&k| truth.data()[k]).count();
        rank_sum += avg * hits as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean dice of `score > t` masks over the set.
pub fn mean_dice_at(scores: &[Vec<f64>], truths: &[Mask], t: f64) -> Result<f64> {
    let mut total = 0.0;
    for (s, m) in scores.iter().zip(truths) {
        if s.len() != m.data().len() {
            return Err(Error::Shape("score map and mask differ in size".into()));
        }
        let pred = Mask::new(m.height(), m.width(), s.iter().map(|&v| v > t).collect())?;
        total += dice(&pred, m)?;
    }
    Ok(total / scores.len() as f64)
}

/// The grid threshold maximizing mean dice; ties go to the smallest `t`.
/// Returns `(t, mean dice)`.
pub fn select_threshold(scores: &[Vec<f64>], truths: &[Mask], grid: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() || grid.is_empty() {
        return Err(Error::InvalidArgument(
            "threshold selection needs images and a grid".into(),
        ));
    }
    if scores.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score maps but {} masks",
            scores.len(),
            truths.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let d = mean_dice_at(scores, truths, t)?;
        best = match best {
            Some((bt, bd)) if bd > d || (bd == d && bt <= t) => Some((bt, bd)),
            _ => Some((t, d)),
        };
    }
    Ok(best.expect("non-empty grid"))
}

/// Evenly spaced thresholds `1/(n+1), …, n/(n+1)`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneGrid {
    pub l: Vec<usize>,
    pub k: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.l.is_empty() || self.k.is_empty() || self.lambda1.is_empty() || self.alpha.is_empty() {
            return Err(Error::InvalidArgument(
                "every tuning grid axis needs a candidate".into(),
            ));
        }
        if let Some(l) = self.l.iter().find(|&&l| l % 2 == 0) {
            return Err(Error::InvalidArgument(format!("l candidates must be odd, got {l}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.l.len() * self.k.len() * self.lambda1.len() * self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub l: usize,
    pub k: usize,
    pub lambda1: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    #[serde(flatten)]
    pub point: TunePoint,
    pub criterion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: TunePoint,
    pub table: Vec<TuneRow>,
}

/// Annotated example: a test image with its true defect image.
#[derive(Clone, Copy, Debug)]
pub struct Annotated<'a> {
    pub image: &'a Image,
    pub defect: &'a Tensor<f32>,
}

/// Prebuilt model and banks the search runs against.
#[derive(Clone, Copy, Debug)]
pub struct TunePipeline<'a> {
    pub model: &'a Model,
    pub raw: &'a RawBank,
    /// One aggregated bank per `l` candidate.
    pub aggs: &'a [AggBank],
    pub aligned: bool,
    /// Solver settings; `lambda1` is overridden by the grid.
    pub decomp: DecompParams,
}

/// `‖X − L − S‖₂` over the vectorized image.
pub fn background_error(x: &Image, background: &Image, defect: &Tensor<f32>) -> Result<f64> {
    if defect.data().len() != x.data().len() || background.shape() != x.shape() {
        return Err(Error::Shape("annotation does not match image".into()));
    }
    let sq: f64 = (0..x.data().len())
        .map(|i| {
            let r = x.data()[i] as f64 - background.data()[i] as f64 - defect.data()[i] as f64;
            r * r
        })
        .sum();
    Ok(sq.sqrt())
}

/// Exhaustive grid search minimizing `Σ_i ‖X_i − L̂_i − S_i‖₂`. Rows are in
/// `l, k, α, λ1` nested order; ties keep the earliest row.
pub fn tune_parameters(samples: &[Annotated], grid: &TuneGrid, pipe: &TunePipeline) -> Result<TuneOutcome> {
    grid.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "tuning needs at least one annotated image".into(),
        ));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &l in &grid.l {
        let agg = pipe
            .aggs
            .iter()
            .find(|a| a.l == l)
            .ok_or_else(|| Error::InvalidArgument(format!("no aggregated bank for l = {l}")))?;
        for &k in &grid.k {
            for &alpha in &grid.alpha {
                let at = |e: Error, lambda1: Option<f64>| {
                    let point = match lambda1 {
                        Some(v) => format!("l={l} k={k} alpha={alpha} lambda1={v}"),
                        None => format!("l={l} k={k} alpha={alpha}"),
                    };
                    with_context(e, &point)
                };
                let params = AddressingParams {
                    k,
                    alpha,
                    aligned: pipe.aligned,
                };
                let priors = par::map_slice(samples, |s| {
                    deep_image_prior(pipe.model, pipe.raw, agg, s.image, &params).map(|r| r.prior)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map_err(|e| at(e, None))?;
                for &lambda1 in &grid.lambda1 {
                    let p = DecompParams { lambda1, ..pipe.decomp };
                    let errs = par::map_range(samples.len(), |i| {
                        let r = decompose(samples[i].image, &priors[i], &p)?;
                        background_error(samples[i].image, &r.background, samples[i].defect)
                    });
                    let mut criterion = 0.0;
                    for e in errs {
                        criterion += e.map_err(|e| at(e, Some(lambda1)))?;
                    }
                    table.push(TuneRow {
                        point: TunePoint { l, k, lambda1, alpha },
                        criterion,
                    });
                }
            }
        }
    }
    let best = table
        .iter()
        .fold(None::<&TuneRow>, |b, r| match b {
            Some(b) if b.criterion <= r.criterion => Some(b),
            _ => Some(r),
        })
        .expect("non-empty table")
        .point;
    Ok(TuneOutcome { best, table })
}

fn with_context(e: Error, point: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{point}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{point}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{point}: {m}")),
        other => other,
    }
}
