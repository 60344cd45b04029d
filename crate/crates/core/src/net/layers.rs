//! Conv / pooling / upsampling primitives and their adjoints.

use crate::linalg::gemm;
use crate::tensor::Array3;

/// Pixels unfolded per convolution tile; keeps the column buffer cache-sized.
const TILE: usize = 128;

/// Unfolds the `kernel × kernel` zero-padded neighbourhoods of pixels
/// `p0..p1` into rows of `cols`, columns ordered `(dy, dx, c)`.
fn im2col_rows(input: &Array3, kernel: usize, p0: usize, p1: usize, cols: &mut [f64]) {
    let (h, w, c) = input.dims();
    let r = (kernel / 2) as isize;
    let row_len = kernel * kernel * c;
    let src = input.as_slice();
    for (p, row) in (p0..p1).zip(cols.chunks_exact_mut(row_len)) {
        let (y, x) = (p / w, p % w);
        for dy in 0..kernel {
            let sy = y as isize + dy as isize - r;
            for dx in 0..kernel {
                let sx = x as isize + dx as isize - r;
                let d = (dy * kernel + dx) * c;
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    row[d..d + c].fill(0.0);
                } else {
                    let s = (sy as usize * w + sx as usize) * c;
                    row[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: adds column gradients of pixels `p0..p1` onto
/// the input grid.
fn col2im_rows(cols: &[f64], kernel: usize, p0: usize, p1: usize, out: &mut Array3) {
    let (h, w, c) = out.dims();
    let r = (kernel / 2) as isize;
    let row_len = kernel * kernel * c;
    let dst = out.as_mut_slice();
    for (p, row) in (p0..p1).zip(cols.chunks_exact(row_len)) {
        let (y, x) = (p / w, p % w);
        for dy in 0..kernel {
            let sy = y as isize + dy as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for dx in 0..kernel {
                let sx = x as isize + dx as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let s = (sy as usize * w + sx as usize) * c;
                let d = (dy * kernel + dx) * c;
                for (o, g) in dst[s..s + c].iter_mut().zip(&row[d..d + c]) {
                    *o += g;
                }
            }
        }
    }
}

/// Whole-image unfold, `(H·W) × (k·k·C)`.
#[cfg(test)]
pub(crate) fn im2col(input: &Array3, kernel: usize) -> Vec<f64> {
    let n = input.pixels();
    let mut cols = vec![0.0; n * kernel * kernel * input.channels()];
    im2col_rows(input, kernel, 0, n, &mut cols);
    cols
}

#[cfg(test)]
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, c: usize, kernel: usize) -> Array3 {
    let mut out = Array3::zeros(h, w, c);
    col2im_rows(cols, kernel, 0, h * w, &mut out);
    out
}

/// Same-padded convolution, evaluated in pixel tiles.
pub(crate) fn conv_forward(input: &Array3, weights: &[f64], bias: &[f64], kernel: usize) -> Array3 {
    let (h, w, c_in) = input.dims();
    let c_out = bias.len();
    let k = kernel * kernel * c_in;
    let n = h * w;
    let mut out = Vec::with_capacity(n * c_out);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    if kernel == 1 {
        gemm(n, k, c_out, 1.0, input.as_slice(), false, weights, false, 1.0, &mut out);
    } else {
        let mut cols = vec![0.0; TILE.min(n) * k];
        for p0 in (0..n).step_by(TILE) {
            let p1 = (p0 + TILE).min(n);
            let cols = &mut cols[..(p1 - p0) * k];
            im2col_rows(input, kernel, p0, p1, cols);
            gemm(p1 - p0, k, c_out, 1.0, cols, false, weights, false, 1.0, &mut out[p0 * c_out..p1 * c_out]);
        }
    }
    Array3::from_vec(h, w, c_out, out).expect("conv output shape")
}

/// Accumulates weight and bias gradients given the layer input; returns the
/// input gradient when `need_input` is set.
pub(crate) fn conv_backward(
    grad_out: &Array3,
    input: &Array3,
    weights: &[f64],
    kernel: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Array3> {
    let (h, w, c_out) = grad_out.dims();
    let c_in = input.channels();
    let n = h * w;
    let k = kernel * kernel * c_in;
    let g = grad_out.as_slice();
    for px in g.chunks_exact(c_out) {
        for (b, v) in grad_b.iter_mut().zip(px) {
            *b += v;
        }
    }
    if kernel == 1 {
        gemm(k, n, c_out, 1.0, input.as_slice(), true, g, false, 1.0, grad_w);
        if !need_input {
            return None;
        }
        let mut dx = vec![0.0; n * k];
        gemm(n, c_out, k, 1.0, g, false, weights, true, 0.0, &mut dx);
        return Some(Array3::from_vec(h, w, c_in, dx).expect("1x1 input gradient shape"));
    }
    let mut cols = vec![0.0; TILE.min(n) * k];
    let mut dinput = need_input.then(|| Array3::zeros(h, w, c_in));
    for p0 in (0..n).step_by(TILE) {
        let p1 = (p0 + TILE).min(n);
        let rows = p1 - p0;
        let cols = &mut cols[..rows * k];
        let gt = &g[p0 * c_out..p1 * c_out];
        im2col_rows(input, kernel, p0, p1, cols);
        gemm(k, rows, c_out, 1.0, cols, true, gt, false, 1.0, grad_w);
        if let Some(di) = dinput.as_mut() {
            gemm(rows, c_out, k, 1.0, gt, false, weights, true, 0.0, cols);
            col2im_rows(cols, kernel, p0, p1, di);
        }
    }
    dinput
}

pub(crate) fn relu_in_place(a: &mut Array3) {
    a.as_mut_slice().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes gradient entries whose activation was clipped.
pub(crate) fn relu_backward(grad: &mut Array3, activation: &Array3) {
    for (g, &a) in grad.as_mut_slice().iter_mut().zip(activation.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 mean pooling; dimensions must be even.
pub(crate) fn avg_pool2(input: &Array3) -> Array3 {
    let (h, w, c) = input.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros(oh, ow, c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let s = input.get(2 * y, 2 * x, ch)
                    + input.get(2 * y, 2 * x + 1, ch)
                    + input.get(2 * y + 1, 2 * x, ch)
                    + input.get(2 * y + 1, 2 * x + 1, ch);
                out.set(y, x, ch, 0.25 * s);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &Array3) -> Array3 {
    let (h, w, c) = grad.dims();
    let mut out = Array3::zeros(2 * h, 2 * w, c);
    for y in 0..2 * h {
        for x in 0..2 * w {
            for ch in 0..c {
                out.set(y, x, ch, 0.25 * grad.get(y / 2, x / 2, ch));
            }
        }
    }
    out
}

/// Source taps of output index `o` for half-pixel 2× linear upsampling with
/// edge clamping: `(lo, w_lo, hi, w_hi)`.
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, f64, usize, f64) {
    let i = o / 2;
    if o % 2 == 0 {
        (i.saturating_sub(1), 0.25, i, 0.75)
    } else {
        (i, 0.75, (i + 1).min(n - 1), 0.25)
    }
}

/// 2× bilinear upsampling (half-pixel centres, clamped edges).
pub(crate) fn upsample2(input: &Array3) -> Array3 {
    let (h, w, c) = input.dims();
    let mut out = Array3::zeros(2 * h, 2 * w, c);
    for y in 0..2 * h {
        let (y0, wy0, y1, wy1) = upsample_taps(y, h);
        for x in 0..2 * w {
            let (x0, wx0, x1, wx1) = upsample_taps(x, w);
            for ch in 0..c {
                let v = wy0 * (wx0 * input.get(y0, x0, ch) + wx1 * input.get(y0, x1, ch))
                    + wy1 * (wx0 * input.get(y1, x0, ch) + wx1 * input.get(y1, x1, ch));
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &Array3) -> Array3 {
    let (h2, w2, c) = grad.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::zeros(h, w, c);
    for y in 0..h2 {
        let (y0, wy0, y1, wy1) = upsample_taps(y, h);
        for x in 0..w2 {
            let (x0, wx0, x1, wx1) = upsample_taps(x, w);
            let base = grad.index(y, x, 0);
            for ch in 0..c {
                let g = grad.as_slice()[base + ch];
                let i00 = out.index(y0, x0, ch);
                let i01 = out.index(y0, x1, ch);
                let i10 = out.index(y1, x0, ch);
                let i11 = out.index(y1, x1, ch);
                let d = out.as_mut_slice();
                d[i00] += wy0 * wx0 * g;
                d[i01] += wy0 * wx1 * g;
                d[i10] += wy1 * wx0 * g;
                d[i11] += wy1 * wx1 * g;
            }
        }
    }
    out
}

/// Reflect-pads odd dimensions by one trailing row/column.
pub(crate) fn reflect_pad_even(input: &Array3) -> Array3 {
    let (h, w, c) = input.dims();
    let (ph, pw) = (h + h % 2, w + w % 2);
    if (ph, pw) == (h, w) {
        return input.clone();
    }
    let mut out = Array3::zeros(ph, pw, c);
    for y in 0..ph {
        let sy = if y < h { y } else { h - 2 };
        for x in 0..pw {
            let sx = if x < w { x } else { w - 2 };
            for ch in 0..c {
                out.set(y, x, ch, input.get(sy, sx, ch));
            }
        }
    }
    out
}

pub(crate) fn crop(input: &Array3, h: usize, w: usize) -> Array3 {
    if input.height() == h && input.width() == w {
        return input.clone();
    }
    let c = input.channels();
    let mut out = Array3::zeros(h, w, c);
    for y in 0..h {
        let src = input.index(y, 0, 0);
        let dst = out.index(y, 0, 0);
        out.as_mut_slice()[dst..dst + w * c].copy_from_slice(&input.as_slice()[src..src + w * c]);
    }
    out
}

/// Adjoint of [`crop`]: zero-fills the region outside the original image.
pub(crate) fn uncrop(input: &Array3, h: usize, w: usize) -> Array3 {
    if input.height() == h && input.width() == w {
        return input.clone();
    }
    let c = input.channels();
    let mut out = Array3::zeros(h, w, c);
    for y in 0..input.height() {
        let src = input.index(y, 0, 0);
        let dst = out.index(y, 0, 0);
        let n = input.width() * c;
        out.as_mut_slice()[dst..dst + n].copy_from_slice(&input.as_slice()[src..src + n]);
    }
    out
}
