//! Small encoder-decoder segmentation network with hand-written backward pass.
//!
//! Layer stack (reference widths in brackets):
//!
//! ```text
//! image ──conv3x3+relu [3→16→16→16]──avgpool 2x──conv3x3+relu [16→32→32]──bilinear 2x──conv1x1 [32→C]──softmax
//! ```
//!
//! All weights live in one flat [`ParameterVector`]; each layer owns a
//! contiguous span holding its `k·k·c_in × c_out` weight matrix (row-major,
//! rows ordered by `(dy, dx, c_in)`) followed by `c_out` biases.

mod checkpoint;
mod layers;
mod model;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{backward, forward, forward_with_tape, Tape};

/// Shape of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
    /// Output widths of the full-resolution conv layers.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the half-resolution conv layers.
    pub bottleneck_widths: Vec<usize>,
    pub kernel_size: usize,
}

impl Architecture {
    pub fn reference(classes: usize) -> Self {
        Self {
            in_channels: 3,
            classes,
            encoder_widths: vec![16, 16, 16],
            bottleneck_widths: vec![32, 32],
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "class count must be at least 2, got {}",
                self.classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.bottleneck_widths.is_empty() {
            return Err(Error::Config(
                "encoder and bottleneck each need at least one layer".into(),
            ));
        }
        if let Some(w) = self
            .encoder_widths
            .iter()
            .chain(&self.bottleneck_widths)
            .find(|&&w| w == 0)
        {
            return Err(Error::Config(format!("layer width must be positive, got {w}")));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Conv layers in evaluation order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            out.push(LayerShape::new(format!("enc{}", i + 1), self.kernel_size, c_in, w));
            c_in = w;
        }
        for (i, &w) in self.bottleneck_widths.iter().enumerate() {
            out.push(LayerShape::new(format!("mid{}", i + 1), self.kernel_size, c_in, w));
            c_in = w;
        }
        out.push(LayerShape::new("head".to_string(), 1, c_in, self.classes));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        Ok(Layout::from_shapes(self.layers()))
    }

    /// Recovers the architecture a layout was built from.
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let spans = layout.spans();
        let bad = |why: &str| Error::Config(format!("layout is not an encoder-decoder: {why}"));
        let head = spans.last().ok_or_else(|| bad("no layers"))?;
        if head.name != "head" || head.kernel != 1 {
            return Err(bad("last layer must be a 1x1 head"));
        }
        let enc: Vec<&LayerSpan> = spans.iter().filter(|s| s.name.starts_with("enc")).collect();
        let mid: Vec<&LayerSpan> = spans.iter().filter(|s| s.name.starts_with("mid")).collect();
        if enc.len() + mid.len() + 1 != spans.len() || enc.is_empty() || mid.is_empty() {
            return Err(bad("unexpected layer names"));
        }
        let arch = Architecture {
            in_channels: enc[0].c_in,
            classes: head.c_out,
            encoder_widths: enc.iter().map(|s| s.c_out).collect(),
            bottleneck_widths: mid.iter().map(|s| s.c_out).collect(),
            kernel_size: enc[0].kernel,
        };
        if arch.layout()? != *layout {
            return Err(bad("layer shapes do not chain"));
        }
        Ok(arch)
    }
}

/// Kernel size and channel counts of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerShape {
    fn new(name: String, kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            name,
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    pub fn param_count(&self) -> usize {
        (self.fan_in() + 1) * self.c_out
    }
}

/// A layer's position inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out
    }

    pub fn weights<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.offset + self.weight_len()..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    spans: Vec<LayerSpan>,
    total: usize,
}

impl Layout {
    fn from_shapes(shapes: Vec<LayerShape>) -> Self {
        let mut offset = 0;
        let spans = shapes
            .into_iter()
            .map(|s| {
                let len = s.param_count();
                let span = LayerSpan {
                    name: s.name,
                    kernel: s.kernel,
                    c_in: s.c_in,
                    c_out: s.c_out,
                    offset,
                    len,
                };
                offset += len;
                span
            })
            .collect();
        Self {
            spans,
            total: offset,
        }
    }

    pub(crate) fn from_spans(spans: Vec<LayerSpan>) -> Result<Self> {
        let mut offset = 0;
        for s in &spans {
            if s.offset != offset || s.len != (s.kernel * s.kernel * s.c_in + 1) * s.c_out {
                return Err(Error::InvalidInput(format!(
                    "layer {} has an inconsistent index range",
                    s.name
                )));
            }
            offset += s.len;
        }
        Ok(Self {
            spans,
            total: offset,
        })
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| s.name == name)
    }
}

/// Flat view of every network weight.
#[derive(Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl fmt::Debug for ParameterVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterVector")
            .field("len", &self.values.len())
            .field("layers", &self.layout.spans.len())
            .finish()
    }
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other_layout: &Layout) -> bool {
        *self.layout == *other_layout
    }
}

/// `∂L/∂θ`, laid out like the [`ParameterVector`] it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &GradientVector, scale: f64) -> Result<()> {
        if *self.layout != *other.layout {
            return Err(Error::Shape("gradient layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Seeded He-uniform initialization: weights ~ U(±sqrt(6 / fan_in)), biases 0.
pub fn init_params(seed: u64, arch: &Architecture) -> Result<ParameterVector> {
    let layout = Arc::new(arch.layout()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.len()];
    for span in layout.spans() {
        let bound = (6.0 / (span.kernel * span.kernel * span.c_in) as f64).sqrt();
        for w in &mut values[span.offset..span.offset + span.weight_len()] {
            let u: f64 = rng.random();
            *w = (2.0 * u - 1.0) * bound;
        }
    }
    Ok(ParameterVector { values, layout })
}
