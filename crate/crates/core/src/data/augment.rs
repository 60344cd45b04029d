use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{Click, ClickSet};
use crate::tensor::Array3;

use super::ClassMask;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub scale_crop: bool,
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip: bool,
    pub noise_sigma: f64,
    /// Geometric resamples tried before falling back to the unaugmented input.
    pub max_retries: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_crop: true,
            min_scale: 0.75,
            max_scale: 1.25,
            flip: true,
            noise_sigma: 0.02,
            max_retries: 10,
        }
    }
}

/// A geometric map from output pixel `(r, c)` back to source coordinates:
/// `src_y = (r + 0.5 + offset_y) / scale − 0.5`, likewise for x on the
/// (optionally mirrored) column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub offset_y: f64,
    pub offset_x: f64,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        offset_y: 0.0,
        offset_x: 0.0,
        flip: false,
    };

    pub fn flip_only() -> Self {
        Transform {
            flip: true,
            ..Self::IDENTITY
        }
    }

    /// Random scale, then a crop window (when the scaled image is larger) or a
    /// centred-with-jitter placement (when smaller).
    fn sample(rng: &mut ChaCha8Rng, p: &AugmentParams, h: usize, w: usize) -> Self {
        let scale = if p.scale_crop {
            rng.random_range(p.min_scale..=p.max_scale)
        } else {
            1.0
        };
        let mut offset = |n: usize| {
            let extra = scale * n as f64 - n as f64;
            if extra.abs() < 1e-12 {
                0.0
            } else if extra > 0.0 {
                rng.random_range(0.0..=extra)
            } else {
                rng.random_range(extra..=0.0)
            }
        };
        let offset_y = offset(h);
        let offset_x = offset(w);
        let flip = p.flip && rng.random_bool(0.5);
        Transform {
            scale,
            offset_y,
            offset_x,
            flip,
        }
    }

    fn source(&self, r: usize, c: usize, w: usize) -> (f64, f64) {
        let c = if self.flip { w - 1 - c } else { c };
        (
            (r as f64 + 0.5 + self.offset_y) / self.scale - 0.5,
            (c as f64 + 0.5 + self.offset_x) / self.scale - 0.5,
        )
    }

    /// Output pixel a source pixel lands on, or `None` when it leaves the frame.
    fn forward(&self, row: usize, col: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let r = ((row as f64 + 0.5) * self.scale - 0.5 - self.offset_y).round();
        let c = ((col as f64 + 0.5) * self.scale - 0.5 - self.offset_x).round();
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            return None;
        }
        let c = c as usize;
        Some((r as usize, if self.flip { w - 1 - c } else { c }))
    }
}

fn bilinear(image: &Array3, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, ch) = image.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let px = image.as_slice();
    for k in 0..ch {
        let a = px[image.index(y0, x0, k)];
        let b = px[image.index(y0, x1, k)];
        let c = px[image.index(y1, x0, k)];
        let d = px[image.index(y1, x1, k)];
        out[k] = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
    }
}

/// Applies a geometric transform to image, mask and clicks. Clicks that leave
/// the frame, land on a pixel whose resampled mask disagrees, or collide with
/// another click are dropped.
pub fn apply_transform(
    image: &Array3,
    mask: &ClassMask,
    clicks: &ClickSet,
    t: &Transform,
) -> Result<(Array3, ClassMask, ClickSet)> {
    let (h, w, ch) = image.dims();
    if (mask.height(), mask.width()) != (h, w) || (clicks.height(), clicks.width()) != (h, w) {
        return Err(Error::Shape("image, mask and clicks differ in size".into()));
    }
    if !(t.scale > 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {}", t.scale)));
    }
    if *t == Transform::IDENTITY {
        return Ok((image.clone(), mask.clone(), clicks.clone()));
    }
    let mut out = Array3::zeros(h, w, ch);
    let mut out_mask = ClassMask::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = t.source(r, c, w);
            let start = out.index(r, c, 0);
            bilinear(image, sy, sx, &mut out.as_mut_slice()[start..start + ch]);
            let my = (sy.round().max(0.0) as usize).min(h - 1);
            let mx = (sx.round().max(0.0) as usize).min(w - 1);
            out_mask.set(r, c, mask.get(my, mx));
        }
    }
    let mut taken = vec![false; h * w];
    let mut kept = Vec::new();
    for click in clicks.entries() {
        let Some((r, c)) = t.forward(click.row, click.col, h, w) else {
            continue;
        };
        if out_mask.get(r, c) != click.class || taken[r * w + c] {
            continue;
        }
        taken[r * w + c] = true;
        kept.push(Click {
            row: r,
            col: c,
            class: click.class,
        });
    }
    let kept = ClickSet::new(h, w, clicks.classes(), kept)?;
    Ok((out, out_mask, kept))
}

/// Random scale-crop, horizontal flip and Gaussian pixel noise, deterministic
/// given `seed`. If a sampled geometry drops every click (or loses a class
/// that was clicked) it is resampled; after `max_retries` failures the input
/// is returned unchanged.
pub fn augment(
    image: &Array3,
    mask: &ClassMask,
    clicks: &ClickSet,
    seed: u64,
    params: &AugmentParams,
) -> Result<(Array3, ClassMask, ClickSet)> {
    if !(params.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {}", params.noise_sigma)));
    }
    if params.scale_crop && !(params.min_scale > 0.0 && params.min_scale <= params.max_scale) {
        return Err(Error::Config(format!(
            "scale range {}..{} is invalid",
            params.min_scale, params.max_scale
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height(), image.width());
    let mut result = None;
    for _ in 0..params.max_retries.max(1) {
        let t = Transform::sample(&mut rng, params, h, w);
        let candidate = apply_transform(image, mask, clicks, &t)?;
        let kept = candidate.2.len();
        if kept > 0 || clicks.is_empty() {
            result = Some(candidate);
            break;
        }
    }
    let (mut img, m, c) = result.unwrap_or_else(|| (image.clone(), mask.clone(), clicks.clone()));
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for v in img.as_mut_slice() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok((img, m, c))
}
