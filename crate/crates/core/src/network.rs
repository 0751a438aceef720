//! The feature extractor φ plus the softmax head, with initialization,
//! full forward/backward passes and plain SGD updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, LayerCache, LayerKind, LayerParams};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for every weight tensor.
pub const INIT_STD: f64 = 0.01;

/// Width of the feature layer for real-image configurations.
pub const DEFAULT_FEATURE_DIM: usize = 512;

/// Width of the feature layer in the desk-scale architecture.
pub const DESK_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Fc {
        out: usize,
    },
}

fn one() -> usize {
    1
}

/// Per-sample input geometry, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputGeometry {
            channels,
            height,
            width,
        }
    }

    pub fn as_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input: InputGeometry,
    pub layers: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub num_pseudo_classes: usize,
}

impl ArchitectureSpec {
    /// conv(8,3x3,pad 1) → relu → maxpool 2 → conv(16,3x3,pad 1) → relu →
    /// maxpool 2 → fc(feature_dim).
    pub fn desk(input: InputGeometry, feature_dim: usize, num_pseudo_classes: usize) -> Self {
        ArchitectureSpec {
            input,
            layers: vec![
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Fc { out: feature_dim },
            ],
            feature_dim,
            num_pseudo_classes,
        }
    }

    /// Resolves every layer to a concrete kind, checking that adjacent
    /// geometries compose and that the last layer is the feature layer.
    pub fn resolve(&self) -> Result<Vec<LayerKind>> {
        if self.num_pseudo_classes < 2 {
            return Err(Error::Config(format!(
                "number of pseudo-classes must be at least 2, got {}",
                self.num_pseudo_classes
            )));
        }
        if self.feature_dim == 0 || self.input.is_empty() {
            return Err(Error::Config("feature_dim and input extents must be positive".into()));
        }
        let mut shape = self.input.as_shape().to_vec();
        let mut kinds = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let between = if i == 0 {
                "input and layer 0".to_string()
            } else {
                format!("layer {} and layer {i}", i - 1)
            };
            let kind = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Architecture {
                            between,
                            reason: format!("conv needs a CHW input, got {shape:?}"),
                        });
                    }
                    LayerKind::Conv {
                        in_channels: shape[0],
                        out_channels: filters,
                        kernel,
                        stride,
                        padding,
                    }
                }
                LayerSpec::Relu => LayerKind::Relu,
                LayerSpec::MaxPool { size, stride } => LayerKind::MaxPool { size, stride },
                LayerSpec::Fc { out } => LayerKind::Fc {
                    in_features: shape.iter().product(),
                    out_features: out,
                },
            };
            LayerParams::zeros(kind).map_err(|e| Error::Architecture {
                between: between.clone(),
                reason: e.to_string(),
            })?;
            shape = kind.output_shape(&shape).map_err(|e| Error::Architecture {
                between,
                reason: e.to_string(),
            })?;
            kinds.push(kind);
        }
        match kinds.last() {
            Some(LayerKind::Fc { out_features, .. }) if *out_features == self.feature_dim => Ok(kinds),
            _ => Err(Error::Architecture {
                between: format!("layer {} and the feature embedding", self.layers.len().saturating_sub(1)),
                reason: format!(
                    "the last layer must be fully-connected with {} outputs",
                    self.feature_dim
                ),
            }),
        }
    }
}

/// Feature extractor layers plus the `feature_dim × Λ` softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    pub layers: Vec<LayerParams>,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
    seed: u64,
}

/// Gradients for every parameter tensor of a [`Network`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<(Tensor, Tensor)>,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
}

impl GradSet {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w, b])
            .chain([&self.head_weights, &self.head_bias])
    }
}

/// Output of [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Tensor,
    pub logits: Tensor,
    caches: Vec<LayerCache>,
}

impl Network {
    /// Gaussian(0, 0.01²) weights everywhere, zero biases, all drawn from
    /// one ChaCha stream seeded with `seed`.
    pub fn init(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let kinds = spec.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape and length agree")
        };
        let mut layers = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let w = if kind.has_params() {
                draw(&kind.weight_shape())
            } else {
                Tensor::zeros(&kind.weight_shape())
            };
            layers.push(LayerParams::new(kind, w, Tensor::zeros(&kind.bias_shape()))?);
        }
        let head_weights = draw(&[spec.feature_dim, spec.num_pseudo_classes]);
        let head_bias = Tensor::zeros(&[spec.num_pseudo_classes]);
        Ok(Network {
            spec,
            layers,
            head_weights,
            head_bias,
            seed,
        })
    }

    /// Reassembles a network from stored tensors, validating every shape.
    pub fn from_parts(
        spec: ArchitectureSpec,
        params: Vec<(Tensor, Tensor)>,
        head_weights: Tensor,
        head_bias: Tensor,
        seed: u64,
    ) -> Result<Self> {
        let kinds = spec.resolve()?;
        if kinds.len() != params.len() {
            return Err(Error::Config(format!(
                "architecture has {} layers, got parameters for {}",
                kinds.len(),
                params.len()
            )));
        }
        let layers = kinds
            .into_iter()
            .zip(params)
            .map(|(k, (w, b))| LayerParams::new(k, w, b))
            .collect::<Result<Vec<_>>>()?;
        let (d, l) = (spec.feature_dim, spec.num_pseudo_classes);
        if head_weights.shape() != [d, l] || head_bias.shape() != [l] {
            return Err(Error::Config(format!(
                "head must be [{d}, {l}] + [{l}], got {:?} + {:?}",
                head_weights.shape(),
                head_bias.shape()
            )));
        }
        Ok(Network {
            spec,
            layers,
            head_weights,
            head_bias,
            seed,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn num_pseudo_classes(&self) -> usize {
        self.spec.num_pseudo_classes
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .chain([&self.head_weights, &self.head_bias])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .chain([&mut self.head_weights, &mut self.head_bias])
    }

    /// Little-endian dump of every parameter, in declaration order.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        self.parameters().flat_map(Tensor::to_le_bytes).collect()
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardPass> {
        let expected = self.spec.input.as_shape();
        if images.shape().len() != 4 || images.shape()[1..] != expected {
            let mut want = vec![images.rows()];
            want.extend(expected);
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: want,
                got: images.shape().to_vec(),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = images.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer_forward(layer, &act).map_err(|e| e.at_layer(i))?;
            caches.push(cache);
            act = out;
        }
        let features = act;
        let logits = self.head_forward(&features)?;
        Ok(ForwardPass {
            features,
            logits,
            caches,
        })
    }

    /// Logits `W_0ᵀ φ + b_0` for a `[batch, feature_dim]` matrix.
    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        let (d, l) = (self.spec.feature_dim, self.spec.num_pseudo_classes);
        if features.shape().len() != 2 || features.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: vec![features.rows(), d],
                got: features.shape().to_vec(),
            });
        }
        let n = features.rows();
        let w = self.head_weights.data();
        let mut logits = Tensor::zeros(&[n, l]);
        for i in 0..n {
            let f = features.row(i);
            let out = logits.row_mut(i);
            out.copy_from_slice(self.head_bias.data());
            for (k, &fv) in f.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(&w[k * l..(k + 1) * l]) {
                    *o += fv * wv;
                }
            }
        }
        Ok(logits)
    }

    /// Head gradients and the softmax-path gradient at the features.
    pub fn head_backward(&self, features: &Tensor, grad_logits: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (d, l) = (self.spec.feature_dim, self.spec.num_pseudo_classes);
        let n = features.rows();
        if grad_logits.shape() != [n, l] {
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: vec![n, l],
                got: grad_logits.shape().to_vec(),
            });
        }
        let w = self.head_weights.data();
        let mut gw = Tensor::zeros(&[d, l]);
        let mut gb = Tensor::zeros(&[l]);
        let mut gf = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let f = features.row(i);
            let g = grad_logits.row(i);
            for (b, gv) in gb.data_mut().iter_mut().zip(g) {
                *b += gv;
            }
            let gfr = gf.row_mut(i);
            for k in 0..d {
                let wr = &w[k * l..(k + 1) * l];
                gfr[k] = wr.iter().zip(g).map(|(a, b)| a * b).sum();
                for (gwv, gv) in gw.data_mut()[k * l..(k + 1) * l].iter_mut().zip(g) {
                    *gwv += f[k] * gv;
                }
            }
        }
        Ok((gf, gw, gb))
    }

    /// Back-propagates `grad_logits` through the head, adds `grad_features`
    /// at the feature layer, then continues through φ.
    pub fn backward(&self, pass: &ForwardPass, grad_features: &Tensor, grad_logits: &Tensor) -> Result<GradSet> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::StaleCache {
                layer: None,
                reason: format!(
                    "forward pass has {} caches, network has {} layers",
                    pass.caches.len(),
                    self.layers.len()
                ),
            });
        }
        if grad_features.shape() != pass.features.shape() {
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: pass.features.shape().to_vec(),
                got: grad_features.shape().to_vec(),
            });
        }
        let (mut grad, gw0, gb0) = self.head_backward(&pass.features, grad_logits)?;
        for (g, extra) in grad.data_mut().iter_mut().zip(grad_features.data()) {
            *g += extra;
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            let g = layer_backward(layer, cache, &grad).map_err(|e| e.at_layer(i))?;
            layer_grads.push((g.weights, g.bias));
            grad = g.input;
        }
        layer_grads.reverse();
        Ok(GradSet {
            layers: layer_grads,
            head_weights: gw0,
            head_bias: gb0,
        })
    }

    /// `p ← p − lr·g` for every parameter; no momentum, no decay.
    pub fn sgd_step(&self, grads: &GradSet, lr: f64) -> Result<Network> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Config("gradient set does not match the network".into()));
        }
        for (i, (p, g)) in self.parameters().zip(grads.tensors()).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    layer: Some(i / 2),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(format!("parameter tensor {i}")));
            }
        }
        let mut next = self.clone();
        for (p, g) in next.parameters_mut().zip(grads.tensors()) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        debug_assert!(next.parameters().all(Tensor::is_finite));
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input: InputGeometry::new(1, 6, 6),
            layers: vec![
                LayerSpec::Conv {
                    filters: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Fc { out: 4 },
            ],
            feature_dim: 4,
            num_pseudo_classes: 3,
        }
    }

    fn random_images(seed: u64, n: usize, geom: InputGeometry) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * geom.len();
        Tensor::new(
            vec![n, geom.channels, geom.height, geom.width],
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_architecture_resolves() {
        let spec = ArchitectureSpec::desk(InputGeometry::new(1, 16, 16), 64, 5);
        let kinds = spec.resolve().unwrap();
        assert_eq!(
            kinds.last(),
            Some(&LayerKind::Fc {
                in_features: 16 * 4 * 4,
                out_features: 64
            })
        );
    }

    #[test]
    fn non_composing_spec_names_the_pair() {
        let mut spec = tiny_spec();
        spec.layers.insert(3, LayerSpec::MaxPool { size: 4, stride: 4 });
        let err = spec.resolve().unwrap_err();
        assert!(err.to_string().contains("layer 2 and layer 3"), "{err}");

        let mut spec = tiny_spec();
        spec.feature_dim = 5;
        assert!(spec.resolve().is_err());

        let mut spec = tiny_spec();
        spec.num_pseudo_classes = 1;
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn biases_start_at_zero() {
        let net = Network::init(ArchitectureSpec::desk(InputGeometry::new(1, 16, 16), 64, 5), 9).unwrap();
        for layer in &net.layers {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        assert!(net.head_bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = tiny_spec();
        let a = Network::init(spec.clone(), 42).unwrap();
        let b = Network::init(spec.clone(), 42).unwrap();
        let c = Network::init(spec, 43).unwrap();
        assert_eq!(a.parameter_bytes(), b.parameter_bytes());
        assert_ne!(a.parameter_bytes(), c.parameter_bytes());
    }

    #[test]
    fn init_weight_statistics() {
        // fc 100 → 100 gives exactly 10^4 weights in one tensor
        let spec = ArchitectureSpec {
            input: InputGeometry::new(1, 10, 10),
            layers: vec![LayerSpec::Fc { out: 100 }],
            feature_dim: 100,
            num_pseudo_classes: 2,
        };
        let net = Network::init(spec, 1234).unwrap();
        let w = net.layers[0].weights.data();
        assert_eq!(w.len(), 10_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * 0.01 / n.sqrt(), "mean {mean}");
        assert!((0.009..=0.011).contains(&std), "std {std}");
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = Network::init(tiny_spec(), 1).unwrap();
        net.head_weights.data_mut().fill(0.0);
        let pass = net.forward(&random_images(2, 3, net.spec().input)).unwrap();
        assert!(pass.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(pass.features.shape(), &[3, 4]);
        assert_eq!(pass.logits.shape(), &[3, 3]);
    }

    #[test]
    fn identity_fc_network_passes_input_through() {
        let spec = ArchitectureSpec {
            input: InputGeometry::new(1, 1, 3),
            layers: vec![LayerSpec::Fc { out: 3 }],
            feature_dim: 3,
            num_pseudo_classes: 2,
        };
        let mut net = Network::init(spec, 0).unwrap();
        let w = net.layers[0].weights.data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor::new(vec![2, 1, 1, 3], vec![1., 2., 3., -4., 5., -6.]).unwrap();
        let pass = net.forward(&x).unwrap();
        assert_eq!(pass.features.data(), x.data());
    }

    #[test]
    fn logits_match_dense_product_oracle() {
        let net = Network::init(tiny_spec(), 5).unwrap();
        let pass = net.forward(&random_images(6, 4, net.spec().input)).unwrap();
        let (d, l) = (4, 3);
        for i in 0..4 {
            for c in 0..l {
                let mut acc = net.head_bias.data()[c];
                for k in 0..d {
                    acc += net.head_weights.data()[k * l + c] * pass.features.row(i)[k];
                }
                assert!((acc - pass.logits.row(i)[c]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let net = Network::init(tiny_spec(), 5).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[2, 1, 5, 6])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Network::init(tiny_spec(), 5).unwrap();
        let pass = net.forward(&random_images(6, 2, net.spec().input)).unwrap();
        let g = net
            .backward(&pass, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 3]))
            .unwrap();
        assert!(g.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_gradient_is_linear_in_upstream() {
        let net = Network::init(tiny_spec(), 5).unwrap();
        let pass = net.forward(&random_images(6, 2, net.spec().input)).unwrap();
        let gl = random_images(7, 2, InputGeometry::new(1, 1, 3)).reshape(vec![2, 3]).unwrap();
        let mut gl2 = gl.clone();
        gl2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let zero = Tensor::zeros(&[2, 4]);
        let a = net.backward(&pass, &zero, &gl).unwrap();
        let b = net.backward(&pass, &zero, &gl2).unwrap();
        for (x, y) in a.head_weights.data().iter().zip(b.head_weights.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let spec = ArchitectureSpec {
            input: InputGeometry::new(1, 1, 1),
            layers: vec![LayerSpec::Fc { out: 1 }],
            feature_dim: 1,
            num_pseudo_classes: 2,
        };
        let mut net = Network::init(spec, 0).unwrap();
        net.layers[0].weights.data_mut()[0] = 1.0;
        let mut grads = GradSet {
            layers: vec![(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1]))],
            head_weights: Tensor::zeros(&[1, 2]),
            head_bias: Tensor::zeros(&[2]),
        };
        grads.layers[0].0.data_mut()[0] = 0.5;
        let next = net.sgd_step(&grads, 0.1).unwrap();
        assert!((next.layers[0].weights.data()[0] - 0.95).abs() < 1e-15);

        let same = net.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(same.parameter_bytes(), net.parameter_bytes());

        grads.head_bias.data_mut()[1] = f64::NAN;
        assert!(matches!(net.sgd_step(&grads, 0.1), Err(Error::NonFiniteGradient(_))));
    }

    /// Two sequential steps re-evaluate the gradient at the moved point, so
    /// they differ from one step along the summed first-point gradients.
    #[test]
    fn two_steps_differ_from_one_summed_step() {
        // f(w) = 0.5 * (w * x)^2 via a 1→1 fc layer; gradient w x^2
        let spec = ArchitectureSpec {
            input: InputGeometry::new(1, 1, 1),
            layers: vec![LayerSpec::Fc { out: 1 }],
            feature_dim: 1,
            num_pseudo_classes: 2,
        };
        let mut net = Network::init(spec, 0).unwrap();
        net.layers[0].weights.data_mut()[0] = 1.0;
        net.head_weights.data_mut().fill(0.0);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let grad_at = |n: &Network| {
            let pass = n.forward(&x).unwrap();
            let mut g = n.backward(&pass, &pass.features, &Tensor::zeros(&[1, 2])).unwrap();
            // keep the bias fixed so the weight follows the 1-D recurrence
            g.layers[0].1.data_mut().fill(0.0);
            g
        };
        let lr = 0.1;
        let g1 = grad_at(&net);
        let stepped = net.sgd_step(&g1, lr).unwrap();
        let g2 = grad_at(&stepped);
        let twice = stepped.sgd_step(&g2, lr).unwrap();

        let mut summed = g1.clone();
        summed.layers[0].0.data_mut()[0] += g1.layers[0].0.data()[0];
        let once = net.sgd_step(&summed, lr).unwrap();
        // w=1: g1 = 4 → w=0.6, g2 = 2.4 → w=0.36; summed: w = 1 - 0.8 = 0.2
        assert!((twice.layers[0].weights.data()[0] - 0.36).abs() < 1e-12);
        assert!((once.layers[0].weights.data()[0] - 0.2).abs() < 1e-12);
    }
}
