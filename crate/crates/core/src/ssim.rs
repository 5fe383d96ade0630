//! Windowed SSIM loss `1 - mean SSIM` and its exact gradient.
//!
//! Statistics use a uniform `window × window` box over every position where
//! the window fits inside the image, per channel, with population
//! (`1/N`) variances. All arithmetic is in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "SSIM window {} must be odd",
                self.window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

/// Planar view of an `H × W × C` interleaved buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sums over every `k × k` window that fits (valid mode). Output is
/// `(h-k+1) × (w-k+1)`.
fn box_valid(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = line[x..x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|d| rows[(y + d) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`box_valid`]: each pixel receives the sum over all windows
/// that contain it.
fn box_full(src: &[f64], oh: usize, ow: usize, k: usize) -> Vec<f64> {
    let (h, w) = (oh + k - 1, ow + k - 1);
    let mut cols = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            let lo = (x + 1).saturating_sub(k);
            let hi = x.min(ow - 1);
            cols[y * w + x] = (lo..=hi).map(|j| src[y * ow + j]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = (y + 1).saturating_sub(k);
        let hi = y.min(oh - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|i| cols[i * w + x]).sum();
        }
    }
    out
}

fn plane(data: &[f64], d: Dims, ch: usize) -> Vec<f64> {
    data.iter().skip(ch).step_by(d.c).copied().collect()
}

struct WindowStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn window_stats(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> WindowStats {
    let k = p.window;
    let n = (k * k) as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sx = box_valid(x, h, w, k);
    let sy = box_valid(y, h, w, k);
    let sxx = box_valid(&xx, h, w, k);
    let syy = box_valid(&yy, h, w, k);
    let sxy = box_valid(&xy, h, w, k);
    let m = sx.len();
    let mut st = WindowStats {
        mu_x: Vec::with_capacity(m),
        mu_y: Vec::with_capacity(m),
        a1: Vec::with_capacity(m),
        a2: Vec::with_capacity(m),
        b1: Vec::with_capacity(m),
        b2: Vec::with_capacity(m),
    };
    for i in 0..m {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        st.mu_x.push(mx);
        st.mu_y.push(my);
        st.a1.push(2.0 * mx * my + p.c1);
        st.a2.push(2.0 * cxy + p.c2);
        st.b1.push(mx * mx + my * my + p.c1);
        st.b2.push(vx + vy + p.c2);
    }
    st
}

fn check(a: &[f64], b: &[f64], d: Dims, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if a.len() != d.len() || b.len() != d.len() {
        return Err(Error::Shape("SSIM inputs differ in size".into()));
    }
    if d.h < p.window || d.w < p.window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than SSIM window {}",
            d.h, d.w, p.window
        )));
    }
    Ok(())
}

/// Mean local SSIM over all valid windows and channels.
pub fn mean_ssim(a: &[f64], b: &[f64], d: Dims, p: &SsimParams) -> Result<f64> {
    check(a, b, d, p)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..d.c {
        let st = window_stats(&plane(a, d, ch), &plane(b, d, ch), d.h, d.w, p);
        for i in 0..st.a1.len() {
            total += (st.a1[i] * st.a2[i]) / (st.b1[i] * st.b2[i]);
        }
        count += st.a1.len();
    }
    Ok(total / count as f64)
}

/// `1 - mean SSIM(a, b)`.
pub fn ssim_loss(a: &[f64], b: &[f64], d: Dims, p: &SsimParams) -> Result<f64> {
    Ok(1.0 - mean_ssim(a, b, d, p)?)
}

/// Loss and its gradient with respect to `a`.
///
/// Per window, `dS/dx_i = 2/(N B1 B2) [μy A2 + (y_i-μy) A1 - S(μx B2 + (x_i-μx) B1)]`.
/// The terms are grouped so that for `a == b` every pairwise difference is
/// computed from bitwise-identical operands and the gradient is exactly zero.
pub fn ssim_loss_grad(a: &[f64], b: &[f64], d: Dims, p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    check(a, b, d, p)?;
    let k = p.window;
    let n = (k * k) as f64;
    let (oh, ow) = (d.h - k + 1, d.w - k + 1);
    let windows = (oh * ow * d.c) as f64;
    let mut grad = vec![0.0; d.len()];
    let mut total = 0.0;
    for ch in 0..d.c {
        let x = plane(a, d, ch);
        let y = plane(b, d, ch);
        let st = window_stats(&x, &y, d.h, d.w, p);
        let m = st.a1.len();
        let mut u = Vec::with_capacity(m);
        let mut v = Vec::with_capacity(m);
        let mut wv = Vec::with_capacity(m);
        for i in 0..m {
            let (a1, a2, b1, b2) = (st.a1[i], st.a2[i], st.b1[i], st.b2[i]);
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            let c = 1.0 / (b1 * b2);
            u.push(c * ((my * a2 - s * mx * b2) + (s * mx * b1 - my * a1)));
            v.push(c * a1);
            wv.push(c * (s * b1));
        }
        let su = box_full(&u, oh, ow, k);
        let sv = box_full(&v, oh, ow, k);
        let sw = box_full(&wv, oh, ow, k);
        let scale = -2.0 / (n * windows);
        for i in 0..d.h * d.w {
            let ds = su[i] + (y[i] * sv[i] - x[i] * sw[i]);
            grad[i * d.c + ch] = scale * ds;
        }
    }
    Ok((1.0 - total / windows, grad))
}
