//! Straight-pipeline CNN definition and a forward pass that keeps every
//! intermediate output around for the gradient code.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        /// `[K,C,kh,kw]`
        kernels: Tensor,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        /// `[M,N]`
        weights: Tensor,
        bias: Vec<f64>,
    },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

/// An immutable, shape-checked layer pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_count: usize,
    shapes: Vec<Vec<usize>>,
}

impl Model {
    /// Builds a model, running [`validate`] so that every model in hand has a
    /// consistent shape table.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 3],
        class_count: usize,
    ) -> Result<Self> {
        let shapes = validate(&layers, input_shape, class_count)?;
        Ok(Model {
            layers,
            input_shape,
            class_count,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Inferred output shape per layer, in layer order.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the last layer producing logits (everything before a trailing
    /// softmax).
    pub(crate) fn logit_layer(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Softmax) => self.layers.len() - 2,
            _ => self.layers.len() - 1,
        }
    }

    /// Resolves `name` to the index of a conv layer.
    pub fn conv_layer_index(&self, name: &str) -> Result<usize> {
        let valid = list_conv_layers(self);
        match self.layer_index(name) {
            None => Err(Error::UnknownLayer {
                name: name.to_string(),
                valid,
            }),
            Some(i) if !self.layers[i].is_conv() => Err(Error::NonConvLayer {
                name: name.to_string(),
                kind: self.layers[i].kind.name(),
                valid,
            }),
            Some(i) => Ok(i),
        }
    }
}

/// Infers per-layer output shapes, failing on the first inconsistent layer.
pub fn validate(
    layers: &[LayerSpec],
    input_shape: [usize; 3],
    class_count: usize,
) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::shape("model has no layers"));
    }
    if input_shape.contains(&0) {
        return Err(Error::shape(format!(
            "input shape {input_shape:?} has a zero dim"
        )));
    }
    if class_count == 0 {
        return Err(Error::shape("class count must be positive"));
    }
    let mut seen = HashSet::new();
    let mut shape = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        if !seen.insert(layer.name.as_str()) {
            return Err(Error::shape(format!("duplicate layer name {}", layer.name)));
        }
        let fail = |msg: String| Error::shape(format!("layer {}: {msg}", layer.name));
        shape = match &layer.kind {
            LayerKind::Conv {
                kernels,
                bias,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(fail(format!("conv needs [C,H,W] input, got {shape:?}")));
                };
                let [k, kc, kh, kw] = kernels.shape()[..] else {
                    return Err(fail("kernels must be [K,C,kh,kw]".into()));
                };
                if kc != c {
                    return Err(fail(format!("kernels expect {kc} channels, input has {c}")));
                }
                if bias.len() != k {
                    return Err(fail(format!("{} biases for {k} kernels", bias.len())));
                }
                let oh = tensor::conv_output_dim(h, kh, *stride, *padding)
                    .map_err(|e| fail(e.to_string()))?;
                let ow = tensor::conv_output_dim(w, kw, *stride, *padding)
                    .map_err(|e| fail(e.to_string()))?;
                vec![k, oh, ow]
            }
            LayerKind::Relu => shape,
            LayerKind::MaxPool { size, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(fail(format!("maxpool needs [C,H,W] input, got {shape:?}")));
                };
                if *size == 0 || *stride == 0 || h < *size || w < *size {
                    return Err(fail(format!("pool {size}/{stride} does not fit {h}x{w}")));
                }
                vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
            }
            LayerKind::Flatten => vec![shape.iter().product()],
            LayerKind::Dense { weights, bias } => {
                let [m, n] = weights.shape()[..] else {
                    return Err(fail("weights must be [M,N]".into()));
                };
                if shape.len() != 1 || shape[0] != n {
                    return Err(fail(format!("expects {n} inputs, got {shape:?}")));
                }
                if bias.len() != m {
                    return Err(fail(format!("{} biases for {m} outputs", bias.len())));
                }
                vec![m]
            }
            LayerKind::Softmax => {
                if i + 1 != layers.len() {
                    return Err(fail("softmax must be the final layer".into()));
                }
                if shape.len() != 1 {
                    return Err(fail(format!("softmax needs a vector, got {shape:?}")));
                }
                shape
            }
        };
        shapes.push(shape.clone());
    }
    if shape != [class_count] {
        return Err(Error::shape(format!(
            "final layer {} produces {shape:?}, expected [{class_count}]",
            layers[layers.len() - 1].name
        )));
    }
    Ok(shapes)
}

/// Conv layer names in forward order.
pub fn list_conv_layers(model: &Model) -> Vec<String> {
    model
        .layers
        .iter()
        .filter(|l| l.is_conv())
        .map(|l| l.name.clone())
        .collect()
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Tensor,
    /// Output of each layer, aligned with `Model::layers`.
    pub outputs: Vec<Tensor>,
    /// Winning input index per output element, for maxpool layers only.
    pub pool_argmax: Vec<Option<Vec<usize>>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    names: Vec<String>,
}

impl ActivationTrace {
    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == layer)
            .map(|i| &self.outputs[i])
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    /// Output feeding layer `index`.
    pub fn layer_input(&self, index: usize) -> &Tensor {
        if index == 0 {
            &self.input
        } else {
            &self.outputs[index - 1]
        }
    }

    pub fn argmax_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward(model: &Model, input: &Tensor) -> Result<ActivationTrace> {
    input.expect_shape(&model.input_shape)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    let mut pool_argmax = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x = outputs.last().unwrap_or(input);
        let (out, argmax) = match &layer.kind {
            LayerKind::Conv {
                kernels,
                bias,
                stride,
                padding,
            } => (tensor::conv2d(x, kernels, bias, *stride, *padding)?, None),
            LayerKind::Relu => (tensor::relu(x), None),
            LayerKind::MaxPool { size, stride } => {
                let p = tensor::maxpool2d(x, *size, *stride)?;
                (p.output, Some(p.argmax))
            }
            LayerKind::Flatten => (x.reshape(&[x.len()])?, None),
            LayerKind::Dense { weights, bias } => (
                Tensor::vector(tensor::dense(x.data(), weights, bias)?)?,
                None,
            ),
            LayerKind::Softmax => (Tensor::vector(tensor::softmax(x.data()))?, None),
        };
        outputs.push(out);
        pool_argmax.push(argmax);
    }
    let logits = outputs[model.logit_layer()].data().to_vec();
    let probabilities = tensor::softmax(&logits);
    Ok(ActivationTrace {
        input: input.clone(),
        outputs,
        pool_argmax,
        logits,
        probabilities,
        names: model.layers.iter().map(|l| l.name.clone()).collect(),
    })
}
