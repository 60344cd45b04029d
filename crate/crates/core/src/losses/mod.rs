//! Loss terms over softmax score maps.
//!
//! Every loss returns its value and the gradient with respect to the student
//! scores; the network backward pass takes it from there. Teacher and
//! pseudo-label inputs are treated as constants.
//!
//! | term            | value                                                |
//! |-----------------|------------------------------------------------------|
//! | partial CE      | `−(1/n) Σ_{clicked i} ln y_i[c_i]`                    |
//! | consistency     | `(1/N) Σ_i ‖t_i − y_i‖²` (all pixels)                |
//! | consistency, exact | same mean, restricted to the `N − n` unclicked pixels |
//! | dense CRF       | `(1/N) Σ_c (Y^c)ᵀ W (1 − Y^c)`                        |
//! | pseudo-label CE | `−(1/N) Σ_i ln y_i[ỹ_i]`                              |
//!
//! The consistency terms are plain mean squared errors and are minimized.

mod crf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array3, ScoreMap};

pub use crf::{build_kernel, crf_loss, crf_loss_direct, crf_loss_pooled, PairwiseKernel, MAX_KERNEL_PIXELS};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// One annotated pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub class: u8,
}

/// Sparse click annotations for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickSet {
    height: usize,
    width: usize,
    classes: usize,
    entries: Vec<Click>,
}

impl ClickSet {
    /// Largest click count allowed for `pixels` pixels: `⌈N/10⌉`.
    pub fn max_clicks(pixels: usize) -> usize {
        pixels.div_ceil(10)
    }

    pub fn new(height: usize, width: usize, classes: usize, entries: Vec<Click>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for c in &entries {
            if c.row >= height || c.col >= width {
                return Err(Error::InvalidInput(format!(
                    "click ({}, {}) outside {height}x{width} image",
                    c.row, c.col
                )));
            }
            if c.class as usize >= classes {
                return Err(Error::InvalidInput(format!(
                    "click ({}, {}) has class {} but only {classes} classes exist",
                    c.row, c.col, c.class
                )));
            }
            if !seen.insert((c.row, c.col)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate click at ({}, {})",
                    c.row, c.col
                )));
            }
        }
        let limit = Self::max_clicks(height * width);
        if entries.len() > limit {
            return Err(Error::InvalidInput(format!(
                "{} clicks on {} pixels exceeds the sparse limit of {limit}",
                entries.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            entries,
        })
    }

    pub fn entries(&self) -> &[Click] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Flat pixel indices of the clicks.
    pub fn pixel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|c| c.row * self.width + c.col)
    }
}

/// Dense per-pixel class labels produced from another network's predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl PseudoLabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidInput(format!(
                "pseudo-label {bad} is not below the class count {classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    /// Per-pixel max-score class of `scores` (lowest index on ties).
    pub fn from_scores(scores: &ScoreMap) -> Self {
        Self {
            height: scores.height(),
            width: scores.width(),
            classes: scores.classes(),
            labels: scores.argmax(),
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// A scalar loss and its gradient with respect to the student scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Array3,
}

impl LossResult {
    /// A zero loss for a disabled term.
    pub fn zero(height: usize, width: usize, classes: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array3::zeros(height, width, classes),
        }
    }

    fn weighted_sum(terms: &[(&LossResult, f64)]) -> Result<LossResult> {
        let (first, _) = terms[0];
        let mut out = LossResult::zero(first.grad.height(), first.grad.width(), first.grad.channels());
        for &(term, weight) in terms {
            if !(weight >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weights must be non-negative, got {weight}"
                )));
            }
            out.grad.add_scaled(&term.grad, weight)?;
            out.value += weight * term.value;
        }
        Ok(out)
    }
}

fn check_same_dims(a: &ScoreMap, b: &ScoreMap) -> Result<()> {
    if a.array().dims() != b.array().dims() {
        return Err(Error::Shape(format!(
            "score maps {:?} and {:?} differ",
            a.array().dims(),
            b.array().dims()
        )));
    }
    Ok(())
}

/// Cross-entropy over the clicked pixels only.
pub fn partial_cross_entropy(scores: &ScoreMap, clicks: &ClickSet) -> Result<LossResult> {
    let (h, w, c) = scores.array().dims();
    if (clicks.height(), clicks.width(), clicks.classes()) != (h, w, c) {
        return Err(Error::Shape(format!(
            "clicks for {}x{}x{} do not match scores {h}x{w}x{c}",
            clicks.height(),
            clicks.width(),
            clicks.classes()
        )));
    }
    if clicks.is_empty() {
        return Err(Error::InvalidInput(
            "partial cross-entropy needs at least one click".into(),
        ));
    }
    let n = clicks.len() as f64;
    let mut out = LossResult::zero(h, w, c);
    for click in clicks.entries() {
        let k = click.class as usize;
        let s = scores.array().get(click.row, click.col, k);
        out.value -= s.max(LOG_FLOOR).ln();
        if s > LOG_FLOOR {
            out.grad.set(click.row, click.col, k, -1.0 / (n * s));
        }
    }
    out.value /= n;
    Ok(out)
}

fn squared_difference(teacher: &ScoreMap, student: &ScoreMap, p: usize) -> f64 {
    teacher
        .array()
        .pixel(p)
        .iter()
        .zip(student.array().pixel(p))
        .map(|(t, s)| (t - s) * (t - s))
        .sum()
}

fn masked_consistency(teacher: &ScoreMap, student: &ScoreMap, skip: &[bool], count: usize) -> LossResult {
    let (h, w, c) = student.array().dims();
    let mut out = LossResult::zero(h, w, c);
    let scale = 2.0 / count as f64;
    let mut sum = 0.0;
    for p in 0..h * w {
        if skip[p] {
            continue;
        }
        sum += squared_difference(teacher, student, p);
        let t = teacher.array().pixel(p);
        let s = student.array().pixel(p);
        for ((g, tv), sv) in out.grad.pixel_mut(p).iter_mut().zip(t).zip(s) {
            *g = -scale * (tv - sv);
        }
    }
    out.value = sum / count as f64;
    out
}

/// Mean squared teacher/student difference over all `N` pixels.
pub fn pixel_consistency_approx(teacher: &ScoreMap, student: &ScoreMap) -> Result<LossResult> {
    check_same_dims(teacher, student)?;
    let n = student.pixels();
    Ok(masked_consistency(teacher, student, &vec![false; n], n))
}

/// Mean squared teacher/student difference over the unclicked pixels.
pub fn pixel_consistency_exact(
    teacher: &ScoreMap,
    student: &ScoreMap,
    clicks: &ClickSet,
) -> Result<LossResult> {
    check_same_dims(teacher, student)?;
    if (clicks.height(), clicks.width()) != (student.height(), student.width()) {
        return Err(Error::Shape("click set does not match score map".into()));
    }
    let n = student.pixels();
    let mut skip = vec![false; n];
    for p in clicks.pixel_indices() {
        skip[p] = true;
    }
    let unlabeled = n - clicks.len();
    if unlabeled == 0 {
        return Err(Error::InvalidInput("every pixel is clicked".into()));
    }
    Ok(masked_consistency(teacher, student, &skip, unlabeled))
}

/// Dense cross-entropy against per-pixel pseudo-labels.
pub fn pseudo_label_loss(scores: &ScoreMap, pseudo: &PseudoLabelMap) -> Result<LossResult> {
    let (h, w, c) = scores.array().dims();
    if (pseudo.height(), pseudo.width()) != (h, w) || pseudo.classes() > c {
        return Err(Error::Shape(format!(
            "pseudo-labels {}x{} ({} classes) do not match scores {h}x{w}x{c}",
            pseudo.height(),
            pseudo.width(),
            pseudo.classes()
        )));
    }
    let n = (h * w) as f64;
    let mut out = LossResult::zero(h, w, c);
    for (p, &label) in pseudo.labels().iter().enumerate() {
        let k = label as usize;
        let s = scores.array().pixel(p)[k];
        out.value -= s.max(LOG_FLOOR).ln();
        if s > LOG_FLOOR {
            out.grad.pixel_mut(p)[k] = -1.0 / (n * s);
        }
    }
    out.value /= n;
    Ok(out)
}

/// `L* = L_pCE + λ_pCons·L_pCons + λ_CRF·L_CRF`.
pub fn combine_ancillary(
    pce: &LossResult,
    pcons: &LossResult,
    crf: &LossResult,
    lambda_pcons: f64,
    lambda_crf: f64,
) -> Result<LossResult> {
    LossResult::weighted_sum(&[(pce, 1.0), (pcons, lambda_pcons), (crf, lambda_crf)])
}

/// `L = L* + λ_pseudo·L_pseudo`.
pub fn combine_primary(lstar: &LossResult, pseudo: &LossResult, lambda_pseudo: f64) -> Result<LossResult> {
    LossResult::weighted_sum(&[(lstar, 1.0), (pseudo, lambda_pseudo)])
}
