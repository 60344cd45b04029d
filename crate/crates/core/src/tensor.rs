//! Dense height × width × channel arrays and the softmax score map.

use crate::error::{Error, Result};

/// Row-major `H × W × C` array of `f64` (channels fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of length {} does not hold {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels `H·W`.
    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Channel values of one pixel, addressed by flat pixel index.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Array3) -> bool {
        self.dims() == other.dims()
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Array3, scale: f64) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::Shape(format!(
                "cannot add {:?} into {:?}",
                other.dims(),
                self.dims()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Per-pixel softmax distribution over classes.
///
/// Entries are strictly positive and each pixel sums to one. Maps produced by
/// [`ScoreMap::softmax`] or [`ScoreMap::new`] satisfy this; [`ScoreMap::from_raw`]
/// exists for probing losses away from the simplex and only checks shape and
/// finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(Array3);

impl ScoreMap {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validating constructor.
    pub fn new(scores: Array3) -> Result<Self> {
        if scores.channels() < 2 {
            return Err(Error::Shape("score map needs at least 2 classes".into()));
        }
        for p in 0..scores.pixels() {
            let px = scores.pixel(p);
            if px.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "score map pixel {p} has a non-positive or non-finite entry"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "score map pixel {p} sums to {sum}"
                )));
            }
        }
        Ok(Self(scores))
    }

    /// Wraps arbitrary finite values without the simplex check.
    pub fn from_raw(scores: Array3) -> Result<Self> {
        if !scores.is_finite() {
            return Err(Error::InvalidInput("score values must be finite".into()));
        }
        Ok(Self(scores))
    }

    /// Numerically stable softmax over the channel axis of `logits`.
    pub fn softmax(logits: &Array3) -> Self {
        let mut out = logits.clone();
        let c = out.channels();
        for px in out.as_mut_slice().chunks_exact_mut(c) {
            let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in px.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in px.iter_mut() {
                *v /= sum;
            }
        }
        Self(out)
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn pixels(&self) -> usize {
        self.0.pixels()
    }

    pub fn array(&self) -> &Array3 {
        &self.0
    }

    pub fn into_array(self) -> Array3 {
        self.0
    }

    /// Class with the highest score at every pixel; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u8> {
        let c = self.classes();
        self.0
            .as_slice()
            .chunks_exact(c)
            .map(|px| {
                let mut best = 0;
                for k in 1..c {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

impl AsRef<Array3> for ScoreMap {
    fn as_ref(&self) -> &Array3 {
        &self.0
    }
}
