//! Intersection-over-union metrics and prediction grids.

use std::path::Path;

use crate::data::{write_ppm, ClassMask, Dataset};
use crate::error::{Error, Result};
use crate::net::{forward, ParameterVector};
use crate::tensor::Array3;

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predicted pixels vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= c) {
            return Err(Error::InvalidInput(format!("class {bad} out of range for {c} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// prediction nor ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let gt_total: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let pred_total: u64 = (0..self.classes).map(|g| self.get(g, class)).sum();
        let union = gt_total + pred_total - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over the classes present in prediction or ground truth; zero
    /// for an empty matrix.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class IoU and their mean for one prediction.
pub fn miou(pred: &ClassMask, gt: &ClassMask, classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred.labels(), gt.labels())?;
    Ok((cm.per_class_iou(), cm.mean_iou()))
}

/// Max-score class per pixel.
pub fn predict(params: &ParameterVector, image: &Array3) -> Result<ClassMask> {
    let scores = forward(image, params)?;
    ClassMask::new(image.height(), image.width(), scores.argmax())
}

fn check_classes(params: &ParameterVector, dataset: &Dataset) -> Result<()> {
    let head = params
        .layout()
        .spans()
        .last()
        .ok_or_else(|| Error::InvalidInput("empty parameter layout".into()))?;
    if head.c_out != dataset.classes {
        return Err(Error::InvalidInput(format!(
            "model predicts {} classes but the dataset has {}",
            head.c_out, dataset.classes
        )));
    }
    Ok(())
}

/// Dataset-level confusion matrix of `params` on every item.
pub fn evaluate(params: &ParameterVector, dataset: &Dataset) -> Result<ConfusionMatrix> {
    check_classes(params, dataset)?;
    let mut cm = ConfusionMatrix::new(dataset.classes);
    for item in &dataset.items {
        let pred = predict(params, &item.image)?;
        cm.add(pred.labels(), item.mask.labels())?;
    }
    Ok(cm)
}

/// Fixed class colours; class `k` uses entry `k % len`.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [200, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 200, 40],
    [180, 60, 200],
    [40, 200, 210],
    [240, 140, 40],
];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

fn paint(mask: &ClassMask, out: &mut Array3, row0: usize, col0: usize) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let rgb = class_color(mask.get(y, x));
            for (ch, v) in rgb.iter().enumerate() {
                out.set(row0 + y, col0 + x, ch, *v as f64 / 255.0);
            }
        }
    }
}

/// Tiles `input | ground truth | prediction`, one row per item, into an
/// `(n·H) × (3·W)` image.
pub fn compose_grid(images: &[Array3], gts: &[ClassMask], preds: &[ClassMask]) -> Result<Array3> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no items to render".into()));
    }
    if images.len() != gts.len() || images.len() != preds.len() {
        return Err(Error::InvalidInput(format!(
            "{} images, {} ground-truth masks, {} predictions",
            images.len(),
            gts.len(),
            preds.len()
        )));
    }
    let (h, w) = (images[0].height(), images[0].width());
    for ((img, gt), pred) in images.iter().zip(gts).zip(preds) {
        if img.dims() != (h, w, 3)
            || (gt.height(), gt.width()) != (h, w)
            || (pred.height(), pred.width()) != (h, w)
        {
            return Err(Error::Shape(format!("all grid items must be {h}x{w} with 3 channels")));
        }
    }
    let mut out = Array3::zeros(images.len() * h, 3 * w, 3);
    for (i, ((img, gt), pred)) in images.iter().zip(gts).zip(preds).enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out.set(i * h + y, x, ch, img.get(y, x, ch));
                }
            }
        }
        paint(gt, &mut out, i * h, w);
        paint(pred, &mut out, i * h, 2 * w);
    }
    Ok(out)
}

/// Writes [`compose_grid`] as a binary PPM.
pub fn render_grid(images: &[Array3], gts: &[ClassMask], preds: &[ClassMask], path: &Path) -> Result<()> {
    write_ppm(path, &compose_grid(images, gts, preds)?)
}
