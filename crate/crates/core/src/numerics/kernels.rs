//! Forward and backward kernels on raw buffers.
//!
//! These are shared by the eager helpers in [`super::ops`] and the taped
//! versions in [`super::Graph`], so both paths produce bit-identical values.

use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [cin, h, w] = input[..] else {
            return Err(invalid!("conv2d input must be C×H×W, got {input:?}"));
        };
        let [cout, kcin, kh, kw] = kernel[..] else {
            return Err(invalid!(
                "conv2d kernel must be Cout×Cin×k×k, got {kernel:?}"
            ));
        };
        if kcin != cin {
            return Err(invalid!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if kh != kw {
            return Err(invalid!("conv2d kernel must be square, got {kh}×{kw}"));
        }
        if bias != [cout] {
            return Err(invalid!(
                "conv2d bias must have {cout} entries (output channels), got shape {bias:?}"
            ));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad {
            return Err(invalid!(
                "conv2d kernel height {kh} exceeds padded input height {}",
                h + 2 * pad
            ));
        }
        if kw > w + 2 * pad {
            return Err(invalid!(
                "conv2d kernel width {kw} exceeds padded input width {}",
                w + 2 * pad
            ));
        }
        Ok(Self {
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `(Cin·k·k) × (H'·W')` patch matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let n = g.out_len();
    let k = g.kernel;
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for ci in 0..g.in_channels {
        let plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let n = g.out_len();
    let k = g.kernel;
    let mut out = vec![T::zero(); g.in_channels * g.in_h * g.in_w];
    for ci in 0..g.in_channels {
        let plane = &mut out[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    for (ox, &v) in row[oy * g.out_w..][..g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation plus per-channel bias. Returns the output and the
/// patch matrix (kept for the backward pass).
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let n = g.out_len();
    let kk = g.patch_len();
    let mut out = Vec::with_capacity(g.out_channels * n);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, n));
    }
    T::gemm(
        g.out_channels,
        kk,
        n,
        T::one(),
        kernel,
        (kk as isize, 1),
        &cols,
        (n as isize, 1),
        T::one(),
        &mut out,
        (n as isize, 1),
    );
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let n = g.out_len();
    let kk = g.patch_len();
    let mut dk = vec![T::zero(); g.out_channels * kk];
    T::gemm(
        g.out_channels,
        n,
        kk,
        T::one(),
        grad_out,
        (n as isize, 1),
        cols,
        (1, n as isize),
        T::zero(),
        &mut dk,
        (kk as isize, 1),
    );
    let db = grad_out
        .chunks_exact(n)
        .map(|row| row.iter().copied().sum())
        .collect();
    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            g.out_channels,
            n,
            T::one(),
            kernel,
            (1, kk as isize),
            grad_out,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

/// Subgradient 0 at exactly zero.
pub fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn pool_output_extent(input: usize, k: usize, stride: usize) -> usize {
    (input - k) / stride + 1
}

/// Window maxima plus the flat input index that won each window. Ties go
/// to the first maximum in row-major scan order.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = pool_output_extent(h, k, stride);
    let wo = pool_output_extent(w, k, stride);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// Align-corners sample positions: `src = dst·(n_src−1)/(n_dst−1)`.
#[derive(Debug, Clone)]
pub struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub fn align_corners_taps<T: Scalar>(n_src: usize, n_dst: usize) -> AxisTaps<T> {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(n_dst),
        hi: Vec::with_capacity(n_dst),
        frac: Vec::with_capacity(n_dst),
    };
    for d in 0..n_dst {
        if n_dst == 1 || n_src == 1 {
            taps.lo.push(0);
            taps.hi.push(0);
            taps.frac.push(T::zero());
            continue;
        }
        // integer numerator keeps endpoints exact
        let num = d * (n_src - 1);
        let den = n_dst - 1;
        let lo = (num / den).min(n_src - 1);
        let hi = (lo + 1).min(n_src - 1);
        let frac = T::from_usize_lossy(num - lo * den) / T::from_usize_lossy(den);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    rows: &AxisTaps<T>,
    cols: &AxisTaps<T>,
) -> Vec<T> {
    let (ho, wo) = (rows.lo.len(), cols.lo.len());
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let (r0, r1, ty) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..wo {
                let (c0, c1, tx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let a = plane[r0 * w + c0];
                let b = plane[r0 * w + c1];
                let cc = plane[r1 * w + c0];
                let d = plane[r1 * w + c1];
                let v = lerp(lerp(a, b, tx), lerp(cc, d, tx), ty);
                let lo = a.min(b).min(cc).min(d);
                let hi = a.max(b).max(cc).max(d);
                out.push(v.max(lo).min(hi));
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    rows: &AxisTaps<T>,
    cols: &AxisTaps<T>,
) -> Vec<T> {
    let (ho, wo) = (rows.lo.len(), cols.lo.len());
    let mut dx = vec![T::zero(); c * h * w];
    let one = T::one();
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        let go = &grad_out[ci * ho * wo..(ci + 1) * ho * wo];
        for oy in 0..ho {
            let (r0, r1, ty) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..wo {
                let (c0, c1, tx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let g = go[oy * wo + ox];
                plane[r0 * w + c0] += g * (one - ty) * (one - tx);
                plane[r0 * w + c1] += g * (one - ty) * tx;
                plane[r1 * w + c0] += g * ty * (one - tx);
                plane[r1 * w + c1] += g * ty * tx;
            }
        }
    }
    dx
}

/// Per-location channel norms of a `C×H×W` buffer.
pub fn channel_norms<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let hw = h * w;
    let mut sq = vec![T::zero(); hw];
    for ci in 0..c {
        for (s, &v) in sq.iter_mut().zip(&x[ci * hw..(ci + 1) * hw]) {
            *s += v * v;
        }
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

pub fn l2_normalize_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let hw = dims.1 * dims.2;
    let norms = channel_norms(x, dims);
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v / norms[i % hw].max(eps))
        .collect();
    (out, norms)
}

pub fn l2_normalize_backward<T: Scalar>(
    y: &[T],
    norms: &[T],
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    eps: T,
) -> Vec<T> {
    let hw = h * w;
    let mut dot = vec![T::zero(); hw];
    for ci in 0..c {
        for k in 0..hw {
            dot[k] += y[ci * hw + k] * grad_out[ci * hw + k];
        }
    }
    let mut dx = vec![T::zero(); c * hw];
    for ci in 0..c {
        for k in 0..hw {
            let i = ci * hw + k;
            dx[i] = if norms[k] > eps {
                (grad_out[i] - y[i] * dot[k]) / norms[k]
            } else {
                grad_out[i] / eps
            };
        }
    }
    dx
}

/// `‖a_k − b_k‖₂` per location; returns the `h·w` distances.
pub fn l2_distance_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    (c, h, w): (usize, usize, usize),
) -> Vec<T> {
    let hw = h * w;
    let mut sq = vec![T::zero(); hw];
    for ci in 0..c {
        let (ra, rb) = (&a[ci * hw..(ci + 1) * hw], &b[ci * hw..(ci + 1) * hw]);
        for k in 0..hw {
            let d = ra[k] - rb[k];
            sq[k] += d * d;
        }
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

/// Gradient w.r.t. `a`; the gradient w.r.t. `b` is its negation. Zero
/// where the distance itself is zero.
pub fn l2_distance_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dist: &[T],
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
) -> Vec<T> {
    let hw = h * w;
    let mut da = vec![T::zero(); c * hw];
    for ci in 0..c {
        for k in 0..hw {
            if dist[k] > T::zero() {
                let i = ci * hw + k;
                da[i] = grad_out[k] * (a[i] - b[i]) / dist[k];
            }
        }
    }
    da
}

pub struct CosineParts<T> {
    pub sim: Vec<T>,
    pub norm_a: Vec<T>,
    pub norm_b: Vec<T>,
}

pub fn cosine_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    dims: (usize, usize, usize),
    eps: T,
) -> CosineParts<T> {
    let (c, h, w) = dims;
    let hw = h * w;
    let norm_a = channel_norms(a, dims);
    let norm_b = channel_norms(b, dims);
    let mut dot = vec![T::zero(); hw];
    for ci in 0..c {
        for k in 0..hw {
            dot[k] += a[ci * hw + k] * b[ci * hw + k];
        }
    }
    let sim = (0..hw)
        .map(|k| dot[k] / (norm_a[k].max(eps) * norm_b[k].max(eps)))
        .collect();
    CosineParts {
        sim,
        norm_a,
        norm_b,
    }
}

/// Gradient of the similarity w.r.t. `x`, where `other` is the partner
/// vector and the norms are taken from the forward pass.
pub fn cosine_backward_one<T: Scalar>(
    x: &[T],
    other: &[T],
    norm_x: &[T],
    norm_other: &[T],
    sim: &[T],
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    eps: T,
) -> Vec<T> {
    let hw = h * w;
    let mut dx = vec![T::zero(); c * hw];
    for ci in 0..c {
        for k in 0..hw {
            let i = ci * hw + k;
            let nx = norm_x[k].max(eps);
            let no = norm_other[k].max(eps);
            let mut d = other[i] / (nx * no);
            if norm_x[k] > eps {
                d -= sim[k] * x[i] / (norm_x[k] * norm_x[k]);
            }
            dx[i] = grad_out[k] * d;
        }
    }
    dx
}

/// Mean over pixels of `−log softmax(logits)[label]`, each pixel scaled by
/// its weight when given; also returns the softmax probabilities for the
/// backward pass.
pub fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    weights: Option<&[T]>,
    (k, h, w): (usize, usize, usize),
) -> (T, Vec<T>) {
    let hw = h * w;
    let mut probs = vec![T::zero(); k * hw];
    let mut total = T::zero();
    for p in 0..hw {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits[c * hw + p]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (logits[c * hw + p] - m).exp();
            probs[c * hw + p] = e;
            z += e;
        }
        for c in 0..k {
            probs[c * hw + p] /= z;
        }
        let nll = z.ln() + m - logits[labels[p] * hw + p];
        total += weights.map_or(nll, |wt| wt[p] * nll);
    }
    (total / T::from_usize_lossy(hw), probs)
}

pub fn softmax_xent_backward<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    weights: Option<&[T]>,
    grad_out: T,
    (k, h, w): (usize, usize, usize),
) -> Vec<T> {
    let hw = h * w;
    let scale = grad_out / T::from_usize_lossy(hw);
    let mut d = probs.to_vec();
    for (p, &lab) in labels.iter().enumerate() {
        d[lab * hw + p] -= T::one();
    }
    for (i, v) in d.iter_mut().enumerate() {
        *v *= weights.map_or(scale, |wt| scale * wt[i % hw]);
    }
    debug_assert_eq!(d.len(), k * hw);
    d
}

pub(crate) fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}
