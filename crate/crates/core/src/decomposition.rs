//! Background/defect decomposition of a test image against its deep image
//! prior, the residual-only baseline, and mask binarization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_delta, AdamConfig, AdamState};
use crate::ssim::{self, Dims, SsimParams};
use crate::tensor::{Image, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompParams {
    pub lambda1: f64,
    /// Weight of the SSIM term in the noisy model; unused otherwise.
    pub lambda2: Option<f64>,
    pub lr: f64,
    pub max_iter: usize,
    /// Relative objective change, measured across `window` iterations, below
    /// which the solver stops.
    pub tol: f64,
    pub window: usize,
    pub ssim: SsimParams,
}

impl Default for DecompParams {
    fn default() -> Self {
        DecompParams {
            lambda1: 1e-5,
            lambda2: None,
            lr: 0.01,
            max_iter: 500,
            tol: 1e-6,
            window: 10,
            ssim: SsimParams::default(),
        }
    }
}

impl DecompParams {
    pub fn with_lambda1(lambda1: f64) -> Self {
        DecompParams {
            lambda1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| {
            Err(Error::InvalidArgument(format!(
                "{name} must be finite and >= 0, got {v}"
            )))
        };
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return bad("lambda1", self.lambda1);
        }
        if let Some(l2) = self.lambda2 {
            if !(l2.is_finite() && l2 >= 0.0) {
                return bad("lambda2", l2);
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("stopping window must be positive".into()));
        }
        self.ssim.validate()
    }
}

#[derive(Clone, Debug)]
pub struct DecompResult {
    pub background: Image,
    /// Signed defect component, `H × W × C`.
    pub defect: Tensor<f64>,
    /// Residual noise, present only for the noisy model.
    pub noise: Option<Tensor<f64>>,
    /// Objective value at initialization followed by one entry per iteration.
    /// The returned components correspond to the minimum of this trace.
    pub objective: Vec<f64>,
}

impl DecompResult {
    pub fn iterations(&self) -> usize {
        self.objective.len().saturating_sub(1)
    }
}

fn dims_of(img: &Image) -> Dims {
    Dims {
        h: img.height(),
        w: img.width(),
        c: img.channels(),
    }
}

fn check_pair(x: &Image, prior: &Image) -> Result<Dims> {
    if x.shape() != prior.shape() {
        return Err(Error::Shape(format!(
            "image {:?} and prior {:?} differ in shape",
            x.shape(),
            prior.shape()
        )));
    }
    Ok(dims_of(x))
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn tensor_like(img: &Image, data: Vec<f64>) -> Tensor<f64> {
    let (h, w, c) = img.shape();
    Tensor::from_vec(&[h, w, c], data).expect("shape of a valid image")
}

pub fn ssim_loss(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    let d = check_pair(a, b)?;
    ssim::ssim_loss(&to_f64(a), &to_f64(b), d, p)
}

pub fn ssim_loss_grad(a: &Image, b: &Image, p: &SsimParams) -> Result<Vec<f64>> {
    let d = check_pair(a, b)?;
    Ok(ssim::ssim_loss_grad(&to_f64(a), &to_f64(b), d, p)?.1)
}

fn finite_or_abort(f: f64, iter: usize) -> Result<f64> {
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Numerical(format!(
            "decomposition objective not finite at iteration {iter}"
        )))
    }
}

fn converged(trace: &[f64], p: &DecompParams) -> bool {
    let n = trace.len();
    if n <= p.window {
        return false;
    }
    let (old, new) = (trace[n - 1 - p.window], trace[n - 1]);
    (old - new).abs() <= p.tol * old.abs()
}

fn l1_dist(x: &[f64], l: &[f64]) -> f64 {
    x.iter().zip(l).map(|(a, b)| (a - b).abs()).sum()
}

/// Solves `min_L ssim_loss(L, X̂) + λ1 ‖X − L‖₁` by projected Adam from
/// `L = X̂`, with `S = X − L`.
///
/// The L1 term is handled orthant-wise: where `L == X` the step uses the
/// minimum-norm subgradient (zero whenever `|∂ssim| ≤ λ1`) and a step that
/// would carry `L` across `X` stops at `X`. This keeps `S` exactly sparse
/// instead of oscillating around zero at the scale of the learning rate.
///
/// The returned background is the iterate with the lowest objective, so the
/// result never scores worse than the initialization.
pub fn decompose(x: &Image, prior: &Image, p: &DecompParams) -> Result<DecompResult> {
    p.validate()?;
    let d = check_pair(x, prior)?;
    let xv = to_f64(x);
    let pv = to_f64(prior);
    let mut l = pv.clone();
    let objective = |l: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (s, g) = ssim::ssim_loss_grad(l, &pv, d, &p.ssim)?;
        Ok((s + p.lambda1 * l1_dist(&xv, l), g))
    };
    let (f0, mut g_ssim) = objective(&l)?;
    let mut trace = vec![finite_or_abort(f0, 0)?];
    let mut best = (f0, l.clone());
    let cfg = AdamConfig::with_lr(p.lr);
    let mut state = AdamState::<f64>::new(l.len());
    let lam = p.lambda1;
    for iter in 1..=p.max_iter {
        let (lr_t, inv_c2) = state.advance(&cfg);
        for i in 0..l.len() {
            let r = l[i] - xv[i];
            let gs = g_ssim[i];
            let g = if r > 0.0 {
                gs + lam
            } else if r < 0.0 || gs > lam {
                gs - lam
            } else if gs < -lam {
                gs + lam
            } else {
                0.0
            };
            let step = adam_delta(&mut state.m[i], &mut state.v[i], g, &cfg, lr_t, inv_c2);
            // The orthant L is allowed to occupy relative to X.
            let side = if r != 0.0 { r.signum() } else { -g.signum() };
            let mut next = l[i] - step;
            if lam > 0.0 && (next - xv[i]) * side < 0.0 || (r == 0.0 && g == 0.0 && lam > 0.0) {
                next = xv[i];
            }
            l[i] = next.clamp(0.0, 1.0);
        }
        let (f, g) = objective(&l)?;
        g_ssim = g;
        trace.push(finite_or_abort(f, iter)?);
        if f < best.0 {
            best = (f, l.clone());
        }
        if converged(&trace, p) {
            break;
        }
    }
    let background = Image::new(d.h, d.w, d.c, best.1.iter().map(|&v| v as f32).collect())?;
    let defect = xv.iter().zip(background.data()).map(|(&a, &b)| a - b as f64).collect();
    Ok(DecompResult {
        defect: tensor_like(x, defect),
        background,
        noise: None,
        objective: trace,
    })
}

/// Soft-thresholding `sign(v) · max(|v| − τ, 0)`.
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Block-coordinate solver for
/// `min ‖X − L − S‖² + λ1 ‖S‖₁ + λ2 ssim_loss(L, X̂)`: an Adam step on `L`
/// with `S` fixed, then `S = shrink(X − L, λ1/2)`. The noise is
/// `e = X − L − S`.
pub fn decompose_noisy(x: &Image, prior: &Image, p: &DecompParams) -> Result<DecompResult> {
    p.validate()?;
    let lambda2 = p
        .lambda2
        .ok_or_else(|| Error::InvalidArgument("noisy decomposition needs lambda2".into()))?;
    let d = check_pair(x, prior)?;
    let xv = to_f64(x);
    let pv = to_f64(prior);
    let mut l = pv.clone();
    let tau = p.lambda1 / 2.0;
    let shrink = |l: &[f64]| -> Vec<f64> { xv.iter().zip(l).map(|(a, b)| soft_threshold(a - b, tau)).collect() };
    let objective = |l: &[f64], s: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (q, g) = ssim::ssim_loss_grad(l, &pv, d, &p.ssim)?;
        let mut fit = 0.0;
        let mut l1 = 0.0;
        for i in 0..l.len() {
            let e = xv[i] - l[i] - s[i];
            fit += e * e;
            l1 += s[i].abs();
        }
        Ok((fit + p.lambda1 * l1 + lambda2 * q, g))
    };
    let mut s = shrink(&l);
    let (f0, mut g_ssim) = objective(&l, &s)?;
    let mut trace = vec![finite_or_abort(f0, 0)?];
    let mut best = (f0, l.clone());
    let cfg = AdamConfig::with_lr(p.lr);
    let mut state = AdamState::<f64>::new(l.len());
    for iter in 1..=p.max_iter {
        let (lr_t, inv_c2) = state.advance(&cfg);
        for i in 0..l.len() {
            let g = -2.0 * (xv[i] - l[i] - s[i]) + lambda2 * g_ssim[i];
            let step = adam_delta(&mut state.m[i], &mut state.v[i], g, &cfg, lr_t, inv_c2);
            l[i] = (l[i] - step).clamp(0.0, 1.0);
        }
        s = shrink(&l);
        let (f, g) = objective(&l, &s)?;
        g_ssim = g;
        trace.push(finite_or_abort(f, iter)?);
        if f < best.0 {
            best = (f, l.clone());
        }
        if converged(&trace, p) {
            break;
        }
    }
    let background = Image::new(d.h, d.w, d.c, best.1.iter().map(|&v| v as f32).collect())?;
    let lf: Vec<f64> = background.data().iter().map(|&v| v as f64).collect();
    let s = shrink(&lf);
    let e = (0..lf.len()).map(|i| xv[i] - lf[i] - s[i]).collect();
    Ok(DecompResult {
        defect: tensor_like(x, s),
        noise: Some(tensor_like(x, e)),
        background,
        objective: trace,
    })
}

/// Residual-only baseline: `X − X̂`.
pub fn residual_segmentation(x: &Image, prior: &Image) -> Result<Tensor<f64>> {
    check_pair(x, prior)?;
    let data = x
        .data()
        .iter()
        .zip(prior.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    Ok(tensor_like(x, data))
}

/// Per-pixel magnitude `max_c |S|` of an `H × W × C` residual.
pub fn defect_magnitude(s: &Tensor<f64>) -> Result<Vec<f64>> {
    let dims = s.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("residual must be H x W x C, got {dims:?}")));
    }
    Ok(s.data()
        .chunks(dims[2])
        .map(|px| px.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect())
}

/// Magnitude min-max normalized to `[0, 1]`; constant magnitude maps to 0.
pub fn normalized_magnitude(s: &Tensor<f64>) -> Result<Vec<f64>> {
    let m = defect_magnitude(s)?;
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo || hi.is_nan() {
        return Ok(vec![0.0; m.len()]);
    }
    Ok(m.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Global threshold on the normalized magnitude: `mask = m_norm > t`.
pub fn binarize(s: &Tensor<f64>, t: f64) -> Result<Mask> {
    let dims = s.dims().to_vec();
    let m = normalized_magnitude(s)?;
    Mask::new(dims[0], dims[1], m.iter().map(|&v| v > t).collect())
}

/// Magnitude image for visualization, normalized as in [`binarize`].
pub fn magnitude_image(s: &Tensor<f64>) -> Result<Image> {
    let dims = s.dims().to_vec();
    let m = normalized_magnitude(s)?;
    Image::new(dims[0], dims[1], 1, m.iter().map(|&v| v as f32).collect())
}
