use crate::error::{Error, Result};
use crate::tensor::{Array3, ScoreMap};

use super::layers::{
    avg_pool2, avg_pool2_backward, conv_backward, conv_forward, crop, reflect_pad_even,
    relu_backward, relu_in_place, uncrop, upsample2, upsample2_backward,
};
use super::{GradientVector, LayerSpan, ParameterVector};

struct ConvRecord {
    span: LayerSpan,
    input: Array3,
    /// Post-ReLU output; `None` for the linear head.
    activation: Option<Array3>,
}

/// Intermediate values of one forward pass, consumed by [`Tape::backward`].
pub struct Tape {
    height: usize,
    width: usize,
    padded: (usize, usize),
    encoder: Vec<ConvRecord>,
    bottleneck: Vec<ConvRecord>,
    head: ConvRecord,
    /// Softmax over the padded grid.
    scores: Array3,
}

fn check_image(image: &Array3, params: &ParameterVector) -> Result<()> {
    let first = &params.layout().spans()[0];
    if image.channels() != first.c_in {
        return Err(Error::Shape(format!(
            "image has {} channels, network expects {}",
            image.channels(),
            first.c_in
        )));
    }
    if image.height() < 2 || image.width() < 2 {
        return Err(Error::Shape(format!(
            "image must be at least 2x2, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    if !image.is_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    Ok(())
}

fn conv_layer(input: &Array3, span: &LayerSpan, values: &[f64], relu: bool) -> (Array3, ConvRecord) {
    let mut out = conv_forward(input, span.weights(values), span.bias(values), span.kernel);
    let activation = if relu {
        relu_in_place(&mut out);
        Some(out.clone())
    } else {
        None
    };
    let record = ConvRecord {
        span: span.clone(),
        input: input.clone(),
        activation,
    };
    (out, record)
}

/// Forward pass retaining everything the backward pass needs.
pub fn forward_with_tape(image: &Array3, params: &ParameterVector) -> Result<(ScoreMap, Tape)> {
    check_image(image, params)?;
    let (h, w) = (image.height(), image.width());
    let values = params.values();
    let spans = params.layout().spans();
    let n_enc = spans.iter().filter(|s| s.name.starts_with("enc")).count();
    let n_mid = spans.len() - n_enc - 1;

    let mut x = reflect_pad_even(image);
    let padded = (x.height(), x.width());

    let mut encoder = Vec::with_capacity(n_enc);
    for span in &spans[..n_enc] {
        let (out, rec) = conv_layer(&x, span, values, true);
        encoder.push(rec);
        x = out;
    }
    x = avg_pool2(&x);
    let mut bottleneck = Vec::with_capacity(n_mid);
    for span in &spans[n_enc..n_enc + n_mid] {
        let (out, rec) = conv_layer(&x, span, values, true);
        bottleneck.push(rec);
        x = out;
    }
    x = upsample2(&x);
    let (logits, head) = conv_layer(&x, &spans[n_enc + n_mid], values, false);

    let scores = ScoreMap::softmax(&logits).into_array();
    let out = ScoreMap::from_raw(crop(&scores, h, w))?;
    let tape = Tape {
        height: h,
        width: w,
        padded,
        encoder,
        bottleneck,
        head,
        scores,
    };
    Ok((out, tape))
}

/// Softmax scores for `image` (values in `[0, 1]`, 3 channels by default).
pub fn forward(image: &Array3, params: &ParameterVector) -> Result<ScoreMap> {
    forward_with_tape(image, params).map(|(s, _)| s)
}

impl Tape {
    /// `∂L/∂θ` given `upstream = ∂L/∂scores`.
    pub fn backward(&self, params: &ParameterVector, upstream: &Array3) -> Result<GradientVector> {
        let c = self.scores.channels();
        if upstream.dims() != (self.height, self.width, c) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match scores {:?}",
                upstream.dims(),
                (self.height, self.width, c)
            )));
        }
        let values = params.values();
        let mut grad = GradientVector::zeros(params.layout().clone());

        // softmax: dz = s ⊙ (g − <s, g>)
        let mut g = uncrop(upstream, self.padded.0, self.padded.1);
        for (gp, sp) in g
            .as_mut_slice()
            .chunks_exact_mut(c)
            .zip(self.scores.as_slice().chunks_exact(c))
        {
            let inner: f64 = gp.iter().zip(sp).map(|(a, b)| a * b).sum();
            for (gv, sv) in gp.iter_mut().zip(sp) {
                *gv = sv * (*gv - inner);
            }
        }

        let mut g = self.layer_backward(&self.head, &g, values, &mut grad, true);
        g = upsample2_backward(&g);
        for rec in self.bottleneck.iter().rev() {
            relu_backward(&mut g, rec.activation.as_ref().expect("relu layer"));
            g = self.layer_backward(rec, &g, values, &mut grad, true);
        }
        g = avg_pool2_backward(&g);
        for (i, rec) in self.encoder.iter().enumerate().rev() {
            relu_backward(&mut g, rec.activation.as_ref().expect("relu layer"));
            g = self.layer_backward(rec, &g, values, &mut grad, i > 0);
        }
        Ok(grad)
    }

    fn layer_backward(
        &self,
        rec: &ConvRecord,
        grad_out: &Array3,
        values: &[f64],
        grad: &mut GradientVector,
        need_input: bool,
    ) -> Array3 {
        let span = &rec.span;
        let wl = span.weight_len();
        let (gw, gb) = grad.values_mut()[span.offset..span.offset + span.len].split_at_mut(wl);
        conv_backward(
            grad_out,
            &rec.input,
            span.weights(values),
            span.kernel,
            gw,
            gb,
            need_input,
        )
        .unwrap_or_else(|| Array3::zeros(0, 0, 0))
    }
}

/// `∂L/∂θ` for `L` with `∂L/∂scores = upstream`, recomputing the forward pass.
pub fn backward(image: &Array3, params: &ParameterVector, upstream: &Array3) -> Result<GradientVector> {
    let (_, tape) = forward_with_tape(image, params)?;
    tape.backward(params, upstream)
}
