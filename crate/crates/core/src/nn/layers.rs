//! Forward and reverse-mode kernels for the autoencoder layers.
//!
//! Activations are `H × W × C` row-major buffers (channel fastest). Conv
//! weights are laid out `[3][3][C_in][C_out]`. Every kernel is generic over
//! the float type so that gradient checks can run in double precision.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Shape3 { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn conv3x3_weight_len(cin: usize, cout: usize) -> usize {
    9 * cin * cout
}

/// 3×3 convolution, stride 1, zero same-padding.
pub fn conv3x3_forward<T: Float>(input: &[T], shape: Shape3, weight: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let Shape3 { h, w, c: cin } = shape;
    assert_eq!(input.len(), shape.len());
    assert_eq!(weight.len(), conv3x3_weight_len(cin, cout));
    assert_eq!(bias.len(), cout);
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..][..cout];
            o.copy_from_slice(bias);
            for dy in 0..3 {
                let iy = y as isize + dy as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let ix = x as isize + dx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &input[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wbase = (dy * 3 + dx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        let wrow = &weight[wbase + ci * cout..][..cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov = *ov + a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Reverse-mode gradients of [`conv3x3_forward`].
pub fn conv3x3_backward<T: Float>(
    input: &[T],
    shape: Shape3,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let Shape3 { h, w, c: cin } = shape;
    assert_eq!(grad_out.len(), h * w * cout);
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); cout];
    let mut gi = if need_input_grad {
        Some(vec![T::zero(); input.len()])
    } else {
        None
    };
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..][..cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b = *b + gv;
            }
            for dy in 0..3 {
                let iy = y as isize + dy as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let ix = x as isize + dx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pix = (iy as usize * w + ix as usize) * cin;
                    let px = &input[pix..][..cin];
                    let wbase = (dy * 3 + dx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        let gwrow = &mut gw[wbase + ci * cout..][..cout];
                        for (gwv, &gv) in gwrow.iter_mut().zip(g) {
                            *gwv = *gwv + a * gv;
                        }
                    }
                    if let Some(gi) = gi.as_mut() {
                        let gpx = &mut gi[pix..][..cin];
                        for (ci, gpv) in gpx.iter_mut().enumerate() {
                            let wrow = &weight[wbase + ci * cout..][..cout];
                            let dot = wrow.iter().zip(g).fold(T::zero(), |acc, (&wv, &gv)| acc + wv * gv);
                            *gpv = *gpv + dot;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

pub fn relu_forward<T: Float>(input: &[T]) -> Vec<T> {
    input
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Float>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2×2 max-pool with stride 2. Returns the pooled map and, per output cell,
/// the flat input index of the winner (first in row-major order on ties).
pub fn maxpool2_forward<T: Float>(input: &[T], shape: Shape3) -> (Vec<T>, Vec<usize>) {
    let Shape3 { h, w, c } = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best_i = ((2 * y) * w + 2 * x) * c + ch;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Float>(argmax: &[usize], grad_out: &[T], input_len: usize) -> Vec<T> {
    let mut gi = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gi[i] = gi[i] + g;
    }
    gi
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Float>(input: &[T], shape: Shape3) -> Vec<T> {
    let Shape3 { h, w, c } = shape;
    let ow = 2 * w;
    let mut out = vec![T::zero(); 4 * h * w * c];
    for y in 0..2 * h {
        for x in 0..ow {
            let src = &input[((y / 2) * w + x / 2) * c..][..c];
            out[(y * ow + x) * c..][..c].copy_from_slice(src);
        }
    }
    out
}

/// Sums the gradient over each replicated 2×2 cell.
pub fn upsample2_backward<T: Float>(grad_out: &[T], in_shape: Shape3) -> Vec<T> {
    let Shape3 { h, w, c } = in_shape;
    let ow = 2 * w;
    let mut gi = vec![T::zero(); h * w * c];
    for y in 0..2 * h {
        for x in 0..ow {
            let g = &grad_out[(y * ow + x) * c..][..c];
            let dst = &mut gi[((y / 2) * w + x / 2) * c..][..c];
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
    }
    gi
}

pub fn sigmoid_forward<T: Float>(input: &[T]) -> Vec<T> {
    input.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect()
}

/// Uses the forward output `y`: `dy/dx = y (1 - y)`.
pub fn sigmoid_backward<T: Float>(output: &[T], grad_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect()
}
