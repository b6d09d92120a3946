//! Small CNN descriptions, parameter state and per-layer gradient statistics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::rng::{seeded, uniform_tensor};
use crate::{Error, Result, Tensor};

/// One layer of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layer {
    /// Convolution with bias. When `skip_from` names an earlier layer, that
    /// layer's output is added before the activation.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        skip_from: Option<usize>,
    },
    AvgPool { kernel: usize, stride: usize },
    /// The classifier head; must be the last layer.
    Fc { out_features: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Which layer a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamTag {
    /// Index into [`ModelSpec::layers`].
    pub layer: usize,
    pub kind: LayerKind,
    pub role: ParamRole,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl ModelSpec {
    /// Three stride-1/2/2 convolutions (8, 16, 16 channels) and a linear head.
    pub fn tiny_cnn(channels: usize, size: usize, classes: usize) -> Self {
        let conv = |out_channels, stride| Layer::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            relu: true,
            skip_from: None,
        };
        ModelSpec {
            input: [channels, size, size],
            classes,
            layers: vec![
                conv(8, 1),
                conv(16, 2),
                conv(16, 2),
                Layer::Fc {
                    out_features: classes,
                },
            ],
        }
    }

    /// Six convolutions in two residual stages with identity skips, average
    /// pooling and a linear head.
    pub fn mini_resnet(channels: usize, size: usize, classes: usize) -> Self {
        let conv = |out_channels, stride, skip_from| Layer::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            relu: true,
            skip_from,
        };
        ModelSpec {
            input: [channels, size, size],
            classes,
            layers: vec![
                conv(16, 2, None),
                conv(16, 1, None),
                conv(16, 1, Some(0)),
                conv(32, 2, None),
                conv(32, 1, None),
                conv(32, 1, Some(3)),
                Layer::AvgPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Fc {
                    out_features: classes,
                },
            ],
        }
    }

    /// Looks up a preset by name: `tiny-cnn` or `mini-resnet`.
    pub fn preset(name: &str, channels: usize, size: usize, classes: usize) -> Result<Self> {
        match name {
            "tiny-cnn" => Ok(Self::tiny_cnn(channels, size, classes)),
            "mini-resnet" => Ok(Self::mini_resnet(channels, size, classes)),
            _ => Err(invalid(alloc::format!("unknown model preset {name:?}"))),
        }
    }

    /// Checks that layer shapes compose and returns the tagged shape of every
    /// parameter, in parameter order (weight before bias, layer by layer).
    pub fn param_shapes(&self) -> Result<Vec<(ParamTag, Vec<usize>)>> {
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 || self.classes == 0 {
            return Err(invalid("input shape and class count must be positive"));
        }
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        let mut out = Vec::new();
        let mut n_conv = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = |kind, role| ParamTag {
                layer: i,
                kind,
                role,
            };
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    skip_from,
                    ..
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(invalid(alloc::format!("layer {i}: zero-sized convolution")));
                    }
                    let oh = kernels::window_out_len(cur[1], kernel, stride, padding);
                    let ow = kernels::window_out_len(cur[2], kernel, stride, padding);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(invalid(alloc::format!(
                            "layer {i}: kernel {kernel} does not fit input {cur:?}"
                        )));
                    };
                    let next = [out_channels, oh, ow];
                    if let Some(j) = skip_from {
                        if j >= i || shapes[j] != next {
                            return Err(invalid(alloc::format!(
                                "layer {i}: skip from layer {j} does not match shape {next:?}"
                            )));
                        }
                    }
                    out.push((
                        tag(LayerKind::Conv, ParamRole::Weight),
                        vec![out_channels, cur[0], kernel, kernel],
                    ));
                    out.push((tag(LayerKind::Conv, ParamRole::Bias), vec![out_channels]));
                    n_conv += 1;
                    cur = next;
                }
                Layer::AvgPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 || kernel > cur[1] || kernel > cur[2] {
                        return Err(invalid(alloc::format!(
                            "layer {i}: pooling window {kernel} does not fit input {cur:?}"
                        )));
                    }
                    cur = [
                        cur[0],
                        (cur[1] - kernel) / stride + 1,
                        (cur[2] - kernel) / stride + 1,
                    ];
                }
                Layer::Fc { out_features } => {
                    if i + 1 != self.layers.len() {
                        return Err(invalid("the fully connected layer must be last"));
                    }
                    if out_features != self.classes {
                        return Err(invalid(alloc::format!(
                            "classifier has {out_features} outputs for {} classes",
                            self.classes
                        )));
                    }
                    let features = cur[0] * cur[1] * cur[2];
                    out.push((tag(LayerKind::Fc, ParamRole::Weight), vec![out_features, features]));
                    out.push((tag(LayerKind::Fc, ParamRole::Bias), vec![out_features]));
                    cur = [out_features, 1, 1];
                }
            }
            shapes.push(cur);
        }
        if n_conv == 0 {
            return Err(invalid("at least one convolution is required"));
        }
        if !matches!(self.layers.last(), Some(Layer::Fc { .. })) {
            return Err(invalid("the last layer must be fully connected"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.param_shapes().map(|_| ())
    }

    pub fn n_conv(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count()
    }

    /// Parameter indices grouped per weighted layer: one group per
    /// convolution in depth order, then one group for the classifier.
    pub fn layer_groups(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.param_shapes()?;
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut fc = Vec::new();
        let mut last_layer = None;
        for (i, (tag, _)) in shapes.iter().enumerate() {
            match tag.kind {
                LayerKind::Fc => fc.push(i),
                LayerKind::Conv => {
                    if last_layer != Some(tag.layer) {
                        groups.push(Vec::new());
                        last_layer = Some(tag.layer);
                    }
                    groups.last_mut().expect("group pushed").push(i);
                }
            }
        }
        groups.push(fc);
        Ok(groups)
    }

    /// Index of the classifier weight in parameter order.
    pub fn fc_weight_index(&self) -> Result<usize> {
        self.param_shapes()?
            .iter()
            .position(|(t, _)| t.kind == LayerKind::Fc && t.role == ParamRole::Weight)
            .ok_or_else(|| invalid("no classifier"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tag: ParamTag,
    pub value: Tensor,
}

/// Trainable parameters of a model, in [`ModelSpec::param_shapes`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<Param>,
    pub seed: u64,
}

impl ModelState {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// A state with the same tags and shapes holding `values`.
    pub fn with_flat(&self, values: &[f64]) -> Result<ModelState> {
        let like = self.tensors();
        let tensors = crate::tensor::unflatten(values, &like)?;
        Ok(self.with_tensors(tensors))
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> ModelState {
        ModelState {
            params: self
                .params
                .iter()
                .zip(tensors)
                .map(|(p, value)| Param { tag: p.tag, value })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn check_aligned(&self, tensors: &[Tensor], op: &'static str) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::arg(
                op,
                alloc::format!("{} tensors for {} parameters", tensors.len(), self.params.len()),
            ));
        }
        for (p, t) in self.params.iter().zip(tensors) {
            if p.value.shape() != t.shape() {
                return Err(Error::shape(op, p.value.shape(), t.shape()));
            }
        }
        Ok(())
    }

    /// Inserts every parameter as a leaf of `g`.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    let shapes = spec.param_shapes()?;
    let mut rng = seeded(seed);
    let params = shapes
        .into_iter()
        .map(|(tag, shape)| {
            let value = match tag.role {
                ParamRole::Bias => Tensor::zeros(&shape),
                ParamRole::Weight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = libm::sqrt(6.0 / fan_in as f64);
                    uniform_tensor(&mut rng, &shape, -bound, bound)
                }
            };
            Param { tag, value }
        })
        .collect();
    Ok(ModelState { params, seed })
}

/// Logits `[B, classes]` for a batch `x` of shape `[B, C, H, W]`.
pub fn forward(g: &mut Graph, spec: &ModelSpec, params: &[Var], x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..] != spec.input {
        let mut want = vec![0];
        want.extend_from_slice(&spec.input);
        return Err(Error::shape("forward", &shape, &want));
    }
    let batch = shape[0];
    let mut outs: Vec<Var> = Vec::with_capacity(spec.layers.len());
    let mut cur = x;
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::arg("forward", "too few parameters"));
    for layer in &spec.layers {
        cur = match *layer {
            Layer::Conv {
                stride,
                padding,
                relu,
                skip_from,
                ..
            } => {
                let (w, b) = (next()?, next()?);
                let h = g.conv2d(cur, w, stride, padding)?;
                let hs = g.shape(h).to_vec();
                let bias = g.channel_bias(b, &hs)?;
                let mut h = g.add(h, bias)?;
                if let Some(j) = skip_from {
                    h = g.add(h, outs[j])?;
                }
                if relu {
                    g.relu(h)?
                } else {
                    h
                }
            }
            Layer::AvgPool { kernel, stride } => g.avgpool2d(cur, kernel, stride)?,
            Layer::Fc { .. } => {
                let (w, b) = (next()?, next()?);
                let features = g.value(cur).len() / batch;
                let flat = g.reshape(cur, &[batch, features])?;
                g.fully_connected(flat, w, b)?
            }
        };
        outs.push(cur);
    }
    Ok(cur)
}

/// Mean cross-entropy gradients with respect to `params`, recorded in `g` so
/// they remain differentiable with respect to `x`.
pub fn batch_gradient(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[Var],
    x: Var,
    labels: &[usize],
) -> Result<Vec<Var>> {
    let logits = forward(g, spec, params, x)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    g.grad(loss, params)
}

/// Numeric gradients of the batch loss at `state`.
pub fn gradients(spec: &ModelSpec, state: &ModelState, x: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let params = state.leaves(&mut g);
    let xv = g.leaf(x.clone());
    let grads = batch_gradient(&mut g, spec, &params, xv, labels)?;
    Ok(grads.iter().map(|&v| g.value(v).clone()).collect())
}

/// Mean cross-entropy loss value at `state`.
pub fn loss(spec: &ModelSpec, state: &ModelState, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let params = state.leaves(&mut g);
    let xv = g.leaf(x.clone());
    let logits = forward(&mut g, spec, &params, xv)?;
    let l = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.value(l).item())
}

/// Fraction of exactly-zero entries in each convolution's gradient, weights
/// and bias pooled, in depth order.
pub fn zero_fraction_per_layer(spec: &ModelSpec, grads: &[Tensor]) -> Result<Vec<f64>> {
    let groups = spec.layer_groups()?;
    let n_params: usize = groups.iter().map(Vec::len).sum();
    if grads.len() != n_params {
        return Err(Error::arg(
            "zero_fraction_per_layer",
            alloc::format!("{} gradients for {} parameters", grads.len(), n_params),
        ));
    }
    Ok(groups[..groups.len() - 1]
        .iter()
        .map(|group| {
            let (zeros, total) = group.iter().fold((0usize, 0usize), |(z, t), &i| {
                let d = grads[i].data();
                (z + d.iter().filter(|v| **v == 0.0).count(), t + d.len())
            });
            zeros as f64 / total as f64
        })
        .collect())
}

/// `W - lr * grads`, computed as `W + (-(lr * g))` entry by entry.
pub fn apply_sgd_step(state: &ModelState, grads: &[Tensor], lr: f64) -> Result<ModelState> {
    state.check_aligned(grads, "apply_sgd_step")?;
    let tensors = state
        .params
        .iter()
        .zip(grads)
        .map(|(p, g)| p.value.zip_map(g, |w, gv| w + -(lr * gv)))
        .collect::<Result<Vec<_>>>()?;
    Ok(state.with_tensors(tensors))
}

/// Adds `delta` to every parameter.
pub fn apply_delta(state: &ModelState, delta: &[Tensor]) -> Result<ModelState> {
    state.check_aligned(delta, "apply_delta")?;
    let tensors = state
        .params
        .iter()
        .zip(delta)
        .map(|(p, d)| p.value.zip_map(d, |w, dv| w + dv))
        .collect::<Result<Vec<_>>>()?;
    Ok(state.with_tensors(tensors))
}
