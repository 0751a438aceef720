//! Per-layer forward and backward kernels.
//!
//! Activations are laid out NCHW for spatial layers and `[N, D]` for
//! fully-connected ones. A fully-connected layer accepts any `[N, ...]`
//! input whose trailing extents multiply to its input width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerKind::Fc {
                in_features,
                out_features,
            } => vec![out_features, in_features],
            LayerKind::Relu | LayerKind::MaxPool { .. } => vec![0],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv { out_channels, .. } => vec![out_channels],
            LayerKind::Fc { out_features, .. } => vec![out_features],
            LayerKind::Relu | LayerKind::MaxPool { .. } => vec![0],
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: None,
            expected,
            got: input.to_vec(),
        };
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else {
                    return Err(mismatch(vec![in_channels, kernel, kernel]));
                };
                if c != in_channels || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(mismatch(vec![in_channels, h.max(kernel), w.max(kernel)]));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerKind::Fc {
                in_features,
                out_features,
            } => {
                if input.iter().product::<usize>() != in_features {
                    return Err(mismatch(vec![in_features]));
                }
                Ok(vec![out_features])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { size, stride } => {
                let [c, h, w] = *input else {
                    return Err(mismatch(vec![1, size, size]));
                };
                if h < size || w < size {
                    return Err(mismatch(vec![c, h.max(size), w.max(size)]));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0,
            LayerKind::Fc {
                in_features,
                out_features,
            } => in_features == 0 || out_features == 0,
            LayerKind::Relu => false,
            LayerKind::MaxPool { size, stride } => size == 0 || stride == 0,
        };
        if bad {
            return Err(Error::Config(format!("zero extent in layer {self:?}")));
        }
        Ok(())
    }
}

/// One layer: its kind plus weights and bias (empty for relu / maxpool).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self> {
        kind.validate()?;
        for (what, t, expected) in [
            ("weights", &weights, kind.weight_shape()),
            ("bias", &bias, kind.bias_shape()),
        ] {
            if t.shape() != expected.as_slice() {
                return Err(Error::Config(format!(
                    "{what} of {kind:?} must have shape {expected:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(LayerParams {
            kind,
            weights,
            bias,
        })
    }

    pub fn zeros(kind: LayerKind) -> Result<Self> {
        let w = Tensor::zeros(&kind.weight_shape());
        let b = Tensor::zeros(&kind.bias_shape());
        Self::new(kind, w, b)
    }

    pub fn relu() -> Self {
        Self::zeros(LayerKind::Relu).expect("relu is always valid")
    }

    pub fn maxpool(size: usize, stride: usize) -> Result<Self> {
        Self::zeros(LayerKind::MaxPool { size, stride })
    }
}

/// Whatever `layer_backward` needs from the matching forward call.
#[derive(Debug, Clone)]
pub struct LayerCache {
    kind: LayerKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    saved: Saved,
}

#[derive(Debug, Clone)]
enum Saved {
    /// im2col buffers, one `[K, P]` block per sample.
    Conv { cols: Vec<f64> },
    Input(Tensor),
    /// Flat input index of the winning element for each output element.
    Argmax(Vec<usize>),
}

impl LayerCache {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn check_batch_input(kind: &LayerKind, input: &Tensor) -> Result<Vec<usize>> {
    if input.shape().len() < 2 {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: vec![1, 1],
            got: input.shape().to_vec(),
        });
    }
    let per_sample = kind.output_shape(&input.shape()[1..]).map_err(|e| match e {
        Error::ShapeMismatch { expected, .. } => {
            let mut full = vec![input.rows()];
            full.extend(expected);
            Error::ShapeMismatch {
                layer: None,
                expected: full,
                got: input.shape().to_vec(),
            }
        }
        other => other,
    })?;
    let mut out = vec![input.rows()];
    out.extend(per_sample);
    Ok(out)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(kind: &LayerKind, input_shape: &[usize], output_shape: &[usize]) -> Self {
        let LayerKind::Conv {
            kernel,
            stride,
            padding,
            ..
        } = *kind
        else {
            unreachable!("conv geometry for non-conv layer")
        };
        ConvGeom {
            c: input_shape[1],
            h: input_shape[2],
            w: input_shape[3],
            k: kernel,
            stride,
            pad: padding,
            oh: output_shape[2],
            ow: output_shape[3],
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every (im2col index, image index) pair that falls inside the
    /// unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (ci * self.h + iy as usize) * self.w + ix as usize;
                            f(row * p + oy * self.ow + ox, src);
                        }
                    }
                }
            }
        }
    }
}

/// Runs one layer on a batch.
pub fn layer_forward(layer: &LayerParams, input: &Tensor) -> Result<(Tensor, LayerCache)> {
    let output_shape = check_batch_input(&layer.kind, input)?;
    let n = input.rows();
    let (output, saved) = match layer.kind {
        LayerKind::Conv { out_channels, .. } => {
            let g = ConvGeom::new(&layer.kind, input.shape(), &output_shape);
            let (kl, p) = (g.patch_len(), g.positions());
            let mut cols = vec![0.0; n * kl * p];
            let mut out = vec![0.0; n * out_channels * p];
            let w = layer.weights.data();
            let b = layer.bias.data();
            for s in 0..n {
                let img = input.row(s);
                let col = &mut cols[s * kl * p..(s + 1) * kl * p];
                g.for_each_tap(|dst, src| col[dst] = img[src]);
                let o = &mut out[s * out_channels * p..(s + 1) * out_channels * p];
                for oc in 0..out_channels {
                    let orow = &mut o[oc * p..(oc + 1) * p];
                    orow.fill(b[oc]);
                    for kk in 0..kl {
                        let wv = w[oc * kl + kk];
                        let crow = &col[kk * p..(kk + 1) * p];
                        for (ov, cv) in orow.iter_mut().zip(crow) {
                            *ov += wv * cv;
                        }
                    }
                }
            }
            (Tensor::new(output_shape.clone(), out)?, Saved::Conv { cols })
        }
        LayerKind::Fc {
            in_features,
            out_features,
        } => {
            let w = layer.weights.data();
            let b = layer.bias.data();
            let mut out = vec![0.0; n * out_features];
            for s in 0..n {
                let x = input.row(s);
                for (o, ov) in out[s * out_features..(s + 1) * out_features]
                    .iter_mut()
                    .enumerate()
                {
                    let wr = &w[o * in_features..(o + 1) * in_features];
                    *ov = b[o] + wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            (
                Tensor::new(output_shape.clone(), out)?,
                Saved::Input(input.clone()),
            )
        }
        LayerKind::Relu => {
            let out: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
            (
                Tensor::new(output_shape.clone(), out)?,
                Saved::Input(input.clone()),
            )
        }
        LayerKind::MaxPool { size, stride } => {
            let [_, c, h, w] = *input.shape() else {
                unreachable!("validated above")
            };
            let (oh, ow) = (output_shape[2], output_shape[3]);
            let x = input.data();
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(out.capacity());
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                // strict comparison: lowest linear index wins ties
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::new(output_shape.clone(), out)?, Saved::Argmax(argmax))
        }
    };
    Ok((
        output,
        LayerCache {
            kind: layer.kind,
            input_shape: input.shape().to_vec(),
            output_shape,
            saved,
        },
    ))
}

/// Pulls `grad_output` back through one layer.
pub fn layer_backward(
    layer: &LayerParams,
    cache: &LayerCache,
    grad_output: &Tensor,
) -> Result<LayerGrads> {
    if cache.kind != layer.kind {
        return Err(Error::StaleCache {
            layer: None,
            reason: format!("cache from {:?}, layer is {:?}", cache.kind, layer.kind),
        });
    }
    if grad_output.shape() != cache.output_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: cache.output_shape.clone(),
            got: grad_output.shape().to_vec(),
        });
    }
    let n = cache.input_shape[0];
    let in_len: usize = cache.input_shape.iter().product();
    let mut gin = vec![0.0; in_len];
    let mut gw = Tensor::zeros(&layer.kind.weight_shape());
    let mut gb = Tensor::zeros(&layer.kind.bias_shape());

    match (&layer.kind, &cache.saved) {
        (LayerKind::Conv { out_channels, .. }, Saved::Conv { cols }) => {
            let oc_n = *out_channels;
            let g = ConvGeom::new(&layer.kind, &cache.input_shape, &cache.output_shape);
            let (kl, p) = (g.patch_len(), g.positions());
            let w = layer.weights.data();
            let gwd = gw.data_mut();
            let gbd = gb.data_mut();
            let mut gcol = vec![0.0; kl * p];
            for s in 0..n {
                let col = &cols[s * kl * p..(s + 1) * kl * p];
                let go = grad_output.row(s);
                gcol.fill(0.0);
                for oc in 0..oc_n {
                    let grow = &go[oc * p..(oc + 1) * p];
                    gbd[oc] += grow.iter().sum::<f64>();
                    for kk in 0..kl {
                        let crow = &col[kk * p..(kk + 1) * p];
                        gwd[oc * kl + kk] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                        let wv = w[oc * kl + kk];
                        for (gc, gv) in gcol[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                            *gc += wv * gv;
                        }
                    }
                }
                let gi = &mut gin[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w];
                g.for_each_tap(|src, dst| gi[dst] += gcol[src]);
            }
        }
        (
            LayerKind::Fc {
                in_features,
                out_features,
            },
            Saved::Input(input),
        ) => {
            let (fi, fo) = (*in_features, *out_features);
            let w = layer.weights.data();
            let gwd = gw.data_mut();
            let gbd = gb.data_mut();
            for s in 0..n {
                let x = input.row(s);
                let go = grad_output.row(s);
                let gi = &mut gin[s * fi..(s + 1) * fi];
                for o in 0..fo {
                    let gv = go[o];
                    gbd[o] += gv;
                    let wr = &w[o * fi..(o + 1) * fi];
                    let gwr = &mut gwd[o * fi..(o + 1) * fi];
                    for j in 0..fi {
                        gwr[j] += gv * x[j];
                        gi[j] += gv * wr[j];
                    }
                }
            }
        }
        (LayerKind::Relu, Saved::Input(input)) => {
            for ((gi, &x), &g) in gin.iter_mut().zip(input.data()).zip(grad_output.data()) {
                // subgradient 0 at x == 0
                *gi = if x > 0.0 { g } else { 0.0 };
            }
        }
        (LayerKind::MaxPool { .. }, Saved::Argmax(argmax)) => {
            for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
                gin[idx] += g;
            }
        }
        _ => {
            return Err(Error::StaleCache {
                layer: None,
                reason: "cache payload does not match layer kind".into(),
            })
        }
    }

    let grads = LayerGrads {
        input: Tensor::new(cache.input_shape.clone(), gin)?,
        weights: gw,
        bias: gb,
    };
    Ok(grads)
}

/// Row-wise softmax of a `[batch, classes]` matrix with max subtraction.
pub fn softmax_probs(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.row_len();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
