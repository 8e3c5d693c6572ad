//! Raw slice kernels shared by forward and backward passes.

use crate::Scalar;

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `src` (of `shape`) into a new buffer laid out as `shape` permuted by `perm`.
pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let n = src.len();
    if rank == 0 || n == 0 {
        return src.to_vec();
    }
    let st = strides(shape);
    let dshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let dstride: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let last = rank - 1;
    let (inner_n, inner_s) = (dshape[last], dstride[last]);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    while out.len() < n {
        if inner_s == 1 {
            out.extend_from_slice(&src[off..off + inner_n]);
        } else {
            out.extend((0..inner_n).map(|i| src[off + i * inner_s]));
        }
        // advance all but the innermost axis
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += dstride[d];
            if idx[d] < dshape[d] {
                break;
            }
            off -= dstride[d] * dshape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Interpolation taps for one axis under the half-pixel-centre convention
/// (`src = (dst + 0.5) * in / out - 0.5`, clamped at the low edge).
pub(crate) fn bilinear_taps(in_n: usize, out_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Adaptive pooling bins: `[floor(i*in/out), ceil((i+1)*in/out))`.
pub(crate) fn pool_bins(in_n: usize, out_n: usize) -> Vec<(usize, usize)> {
    (0..out_n)
        .map(|i| {
            let start = i * in_n / out_n;
            let end = ((i + 1) * in_n).div_ceil(out_n);
            (start, end)
        })
        .collect()
}

/// Patch matrix `[(c*k*k) x (h*w)]` for a stride-1 "same" convolution with
/// edge-replicating borders.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    let src_row = &plane[sy * w..(sy + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let dx = kx as isize - r;
                    for (xo, d) in dst_row.iter_mut().enumerate() {
                        let sx = (xo as isize + dx).clamp(0, w as isize - 1) as usize;
                        *d = src_row[sx];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    let dxo = kx as isize - r;
                    for xo in 0..w {
                        let sx = (xo as isize + dxo).clamp(0, w as isize - 1) as usize;
                        plane[sy * w + sx] += src[y * w + xo];
                    }
                }
            }
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}
