//! Dense-CRF relaxation with a bilateral Gaussian affinity.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Array3, ScoreMap};

use super::LossResult;

/// Largest pixel count the dense kernel accepts (64 × 64).
pub const MAX_KERNEL_PIXELS: usize = 64 * 64;

/// Symmetric affinity matrix over all pixel pairs of one image:
///
/// `W_ij = exp(−‖p_i − p_j‖² / 2σ_xy² − ‖I_i − I_j‖² / 2σ_rgb²)`, `W_ii = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseKernel {
    height: usize,
    width: usize,
    sigma_xy: f64,
    sigma_rgb: f64,
    weights: Vec<f64>,
    row_sums: Vec<f64>,
}

impl PairwiseKernel {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma_xy(&self) -> f64 {
        self.sigma_xy
    }

    pub fn sigma_rgb(&self) -> f64 {
        self.sigma_rgb
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.pixels() + j]
    }

    /// Row-major `N × N` matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.weights
    }
}

pub fn build_kernel(image: &Array3, sigma_xy: f64, sigma_rgb: f64) -> Result<PairwiseKernel> {
    if !(sigma_xy > 0.0) || !(sigma_rgb > 0.0) {
        return Err(Error::InvalidInput(format!(
            "kernel bandwidths must be positive, got σ_xy={sigma_xy}, σ_rgb={sigma_rgb}"
        )));
    }
    let (h, w, c) = image.dims();
    let n = h * w;
    if n > MAX_KERNEL_PIXELS {
        return Err(Error::InvalidInput(format!(
            "dense kernel limited to {MAX_KERNEL_PIXELS} pixels, image has {n}"
        )));
    }
    let inv_xy = 1.0 / (2.0 * sigma_xy * sigma_xy);
    let inv_rgb = 1.0 / (2.0 * sigma_rgb * sigma_rgb);
    let spatial_y: Vec<f64> = (0..h).map(|d| (d * d) as f64 * inv_xy).collect();
    let spatial_x: Vec<f64> = (0..w).map(|d| (d * d) as f64 * inv_xy).collect();
    let px = image.as_slice();

    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        let ci = &px[i * c..(i + 1) * c];
        for j in i + 1..n {
            let (yj, xj) = (j / w, j % w);
            let cj = &px[j * c..(j + 1) * c];
            let color: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = spatial_y[yi.abs_diff(yj)] + spatial_x[xi.abs_diff(xj)] + color * inv_rgb;
            let v = (-e).exp();
            weights[i * n + j] = v;
            weights[j * n + i] = v;
        }
    }
    let row_sums = weights.chunks_exact(n).map(|r| r.iter().sum()).collect();
    Ok(PairwiseKernel {
        height: h,
        width: w,
        sigma_xy,
        sigma_rgb,
        weights,
        row_sums,
    })
}

/// `(1/N) Σ_c (Y^c)ᵀ W (1 − Y^c)` with gradient `(1/N)(W(1 − Y^c) − Wᵀ Y^c)`.
pub fn crf_loss(scores: &ScoreMap, kernel: &PairwiseKernel) -> Result<LossResult> {
    if (scores.height(), scores.width()) != (kernel.height, kernel.width) {
        return Err(Error::Shape(format!(
            "kernel built for {}x{} but scores are {}x{}",
            kernel.height,
            kernel.width,
            scores.height(),
            scores.width()
        )));
    }
    let n = kernel.pixels();
    let c = scores.classes();
    let y = scores.array().as_slice();
    // wy = W·Y (N × C); W is symmetric so Wᵀ·Y is the same product.
    let mut wy = vec![0.0; n * c];
    gemm(n, n, c, 1.0, &kernel.weights, false, y, false, 0.0, &mut wy);

    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        let r = kernel.row_sums[i];
        for k in 0..c {
            let idx = i * c + k;
            let w_one_minus_y = r - wy[idx];
            value += y[idx] * w_one_minus_y;
            grad[idx] = inv_n * (w_one_minus_y - wy[idx]);
        }
    }
    Ok(LossResult {
        value: value * inv_n,
        grad: Array3::from_vec(scores.height(), scores.width(), c, grad)?,
    })
}

fn block_mean(a: &Array3, f: usize) -> Array3 {
    let (h, w, c) = a.dims();
    let (oh, ow) = (h / f, w / f);
    let mut out = Array3::zeros(oh, ow, c);
    let scale = 1.0 / (f * f) as f64;
    for y in 0..h {
        for x in 0..w {
            let dst = out.index(y / f, x / f, 0);
            let src = a.index(y, x, 0);
            for k in 0..c {
                out.as_mut_slice()[dst + k] += scale * a.as_slice()[src + k];
            }
        }
    }
    out
}

fn block_mean_adjoint(g: &Array3, f: usize) -> Array3 {
    let (oh, ow, c) = g.dims();
    let mut out = Array3::zeros(oh * f, ow * f, c);
    let scale = 1.0 / (f * f) as f64;
    for y in 0..oh * f {
        for x in 0..ow * f {
            let src = g.index(y / f, x / f, 0);
            let dst = out.index(y, x, 0);
            for k in 0..c {
                out.as_mut_slice()[dst + k] = scale * g.as_slice()[src + k];
            }
        }
    }
    out
}

/// Exponents above this contribute less than `1e-16` and are skipped.
const EXPONENT_CUTOFF: f64 = 36.8;

/// Same value and gradient as [`crf_loss`] with the kernel built from
/// `image`, computed pair by pair without materializing the `N × N` matrix.
pub fn crf_loss_direct(image: &Array3, scores: &ScoreMap, sigma_xy: f64, sigma_rgb: f64) -> Result<LossResult> {
    if !(sigma_xy > 0.0) || !(sigma_rgb > 0.0) {
        return Err(Error::InvalidInput(format!(
            "kernel bandwidths must be positive, got σ_xy={sigma_xy}, σ_rgb={sigma_rgb}"
        )));
    }
    let (h, w, ch) = image.dims();
    if (h, w) != (scores.height(), scores.width()) {
        return Err(Error::Shape("image and scores differ in size".into()));
    }
    let n = h * w;
    let c = scores.classes();
    let inv_xy = 1.0 / (2.0 * sigma_xy * sigma_xy);
    let inv_rgb = 1.0 / (2.0 * sigma_rgb * sigma_rgb);
    let spatial_y: Vec<f64> = (0..h).map(|d| (d * d) as f64 * inv_xy).collect();
    let spatial_x: Vec<f64> = (0..w).map(|d| (d * d) as f64 * inv_xy).collect();
    let px = image.as_slice();
    let y = scores.array().as_slice();

    let mut wy = vec![0.0; n * c];
    let mut row_sums = vec![0.0; n];
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        let ci = &px[i * ch..(i + 1) * ch];
        let si = &y[i * c..(i + 1) * c];
        let mut acc_row = 0.0;
        let mut acc_wy = vec![0.0; c];
        for yj in yi..h {
            let sy = spatial_y[yj - yi];
            if sy > EXPONENT_CUTOFF {
                break;
            }
            let x_start = if yj == yi { xi + 1 } else { 0 };
            for xj in x_start..w {
                let spatial = sy + spatial_x[xi.abs_diff(xj)];
                if spatial > EXPONENT_CUTOFF {
                    continue;
                }
                let j = yj * w + xj;
                let cj = &px[j * ch..(j + 1) * ch];
                let color: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
                let e = spatial + color * inv_rgb;
                if e > EXPONENT_CUTOFF {
                    continue;
                }
                let v = (-e).exp();
                acc_row += v;
                row_sums[j] += v;
                let sj = &y[j * c..(j + 1) * c];
                for (a, s) in acc_wy.iter_mut().zip(sj) {
                    *a += v * s;
                }
                for (a, s) in wy[j * c..(j + 1) * c].iter_mut().zip(si) {
                    *a += v * s;
                }
            }
        }
        row_sums[i] += acc_row;
        for (a, s) in wy[i * c..(i + 1) * c].iter_mut().zip(&acc_wy) {
            *a += s;
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..c {
            let idx = i * c + k;
            let w_one_minus_y = row_sums[i] - wy[idx];
            value += y[idx] * w_one_minus_y;
            grad[idx] = inv_n * (w_one_minus_y - wy[idx]);
        }
    }
    Ok(LossResult {
        value: value * inv_n,
        grad: Array3::from_vec(h, w, c, grad)?,
    })
}

/// CRF term evaluated on a `factor`× mean-pooled grid.
///
/// Image and scores are averaged over `factor × factor` blocks, the kernel is
/// applied on the coarse grid with `σ_xy / factor`, and the gradient is spread
/// back evenly over each block. `factor = 1` is the full-resolution loss.
pub fn crf_loss_pooled(
    image: &Array3,
    scores: &ScoreMap,
    sigma_xy: f64,
    sigma_rgb: f64,
    factor: usize,
) -> Result<LossResult> {
    if factor == 0 {
        return Err(Error::Config("CRF pooling factor must be positive".into()));
    }
    if (image.height(), image.width()) != (scores.height(), scores.width()) {
        return Err(Error::Shape("image and scores differ in size".into()));
    }
    if factor == 1 {
        return crf_loss_direct(image, scores, sigma_xy, sigma_rgb);
    }
    if image.height() % factor != 0 || image.width() % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible by CRF pooling factor {factor}",
            image.height(),
            image.width()
        )));
    }
    let coarse_image = block_mean(image, factor);
    let coarse_scores = ScoreMap::from_raw(block_mean(scores.array(), factor))?;
    let coarse = crf_loss_direct(&coarse_image, &coarse_scores, sigma_xy / factor as f64, sigma_rgb)?;
    Ok(LossResult {
        value: coarse.value,
        grad: block_mean_adjoint(&coarse.grad, factor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacent_same_color_pixels() {
        let img = Array3::filled(1, 2, 3, 0.3);
        let k = build_kernel(&img, 1.0, 0.1).unwrap();
        assert_eq!(k.get(0, 1), (-0.5f64).exp());
        assert_eq!(k.get(1, 0), k.get(0, 1));
        assert_eq!(k.get(0, 0), 0.0);
    }

    #[test]
    fn rejects_bad_bandwidth_and_size() {
        let img = Array3::filled(2, 2, 3, 0.0);
        assert!(build_kernel(&img, 0.0, 0.1).is_err());
        assert!(build_kernel(&img, 1.0, -1.0).is_err());
        assert!(build_kernel(&Array3::zeros(65, 64, 3), 5.0, 0.1).is_err());
    }

    #[test]
    fn two_pixel_two_class_value() {
        // W = [[0,w],[w,0]], Y = [(1,0),(0,1)]:
        // Σ_c Y_cᵀ W (1−Y_c) = w + w = 2w; normalized by N = 2 → w
        let img = Array3::from_vec(1, 2, 3, vec![0.0, 0.0, 0.0, 0.1, 0.0, 0.0]).unwrap();
        let k = build_kernel(&img, 1.0, 0.1).unwrap();
        let wv = k.get(0, 1);
        let y = ScoreMap::from_raw(Array3::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let r = crf_loss(&y, &k).unwrap();
        assert!((r.value - wv).abs() < 1e-15);
    }

    #[test]
    fn one_hot_same_class_is_zero() {
        let img = Array3::from_vec(2, 2, 3, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let k = build_kernel(&img, 2.0, 0.5).unwrap();
        let mut y = vec![0.0; 12];
        for p in 0..4 {
            y[p * 3 + 1] = 1.0;
        }
        let s = ScoreMap::from_raw(Array3::from_vec(2, 2, 3, y).unwrap()).unwrap();
        assert_eq!(crf_loss(&s, &k).unwrap().value, 0.0);
    }

    #[test]
    fn pooled_factor_one_matches_direct() {
        let img = Array3::from_vec(2, 2, 3, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let s = ScoreMap::softmax(&Array3::from_vec(2, 2, 2, vec![0.1, 0.3, -0.2, 0.5, 1.0, 0.0, 0.2, 0.2]).unwrap());
        let a = crf_loss_pooled(&img, &s, 1.5, 0.3, 1).unwrap();
        let b = crf_loss(&s, &build_kernel(&img, 1.5, 0.3).unwrap()).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn direct_matches_dense_on_larger_image() {
        let img = Array3::from_vec(7, 9, 3, (0..189).map(|v| ((v * 37) % 23) as f64 / 23.0).collect()).unwrap();
        let logits = Array3::from_vec(7, 9, 4, (0..252).map(|v| ((v * 13) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let s = ScoreMap::softmax(&logits);
        let a = crf_loss_direct(&img, &s, 3.0, 0.2).unwrap();
        let b = crf_loss(&s, &build_kernel(&img, 3.0, 0.2).unwrap()).unwrap();
        assert!((a.value - b.value).abs() < 1e-13);
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn pooled_rejects_indivisible() {
        let img = Array3::zeros(3, 4, 3);
        let s = ScoreMap::softmax(&Array3::zeros(3, 4, 2));
        assert!(crf_loss_pooled(&img, &s, 5.0, 0.1, 2).is_err());
    }
}
