//! Model persistence and built-in fixture networks.
//!
//! A model is stored as two files: a JSON manifest describing the layer
//! pipeline and a headerless blob of little-endian `f32` values. Weights are
//! widened to `f64` on load and narrowed (round-to-nearest) on save.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input_shape": [1, 16, 16],
//!   "class_count": 10,
//!   "layers": [
//!     { "name": "conv1", "kind": "conv", "params": { "padding": 0, "stride": 1 },
//!       "weight_offset": 0, "weight_shape": [4, 1, 3, 3],
//!       "bias_offset": 144, "bias_shape": [4] },
//!     { "name": "relu1", "kind": "relu", "params": {} }
//!   ]
//! }
//! ```
//!
//! Offsets are in bytes from the start of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, Model};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_shape: Option<Vec<usize>>,
}

/// Serializes a model into manifest JSON and weight blob bytes.
pub fn encode(model: &Model) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut push = |values: &[f64]| {
        let offset = blob.len();
        for &v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset
    };
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut entry = ManifestLayer {
            name: layer.name.clone(),
            kind: layer.kind.name().to_string(),
            params: BTreeMap::new(),
            weight_offset: None,
            weight_shape: None,
            bias_offset: None,
            bias_shape: None,
        };
        match &layer.kind {
            LayerKind::Conv {
                kernels,
                bias,
                stride,
                padding,
            } => {
                entry.params.insert("stride".into(), *stride);
                entry.params.insert("padding".into(), *padding);
                entry.weight_offset = Some(push(kernels.data()));
                entry.weight_shape = Some(kernels.shape().to_vec());
                entry.bias_offset = Some(push(bias));
                entry.bias_shape = Some(vec![bias.len()]);
            }
            LayerKind::Dense { weights, bias } => {
                entry.weight_offset = Some(push(weights.data()));
                entry.weight_shape = Some(weights.shape().to_vec());
                entry.bias_offset = Some(push(bias));
                entry.bias_shape = Some(vec![bias.len()]);
            }
            LayerKind::MaxPool { size, stride } => {
                entry.params.insert("size".into(), *size);
                entry.params.insert("stride".into(), *stride);
            }
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Softmax => {}
        }
        layers.push(entry);
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        class_count: model.class_count(),
        layers,
    };
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(0, e.to_string()))?;
    json.push('\n');
    Ok((json, blob))
}

pub fn parse_manifest(json: &str) -> Result<ModelManifest> {
    let manifest: ModelManifest = serde_json::from_str(json).map_err(|e| {
        let offset = json
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(offset, e.to_string())
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            0,
            format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// A weight span declared by the manifest.
struct Span {
    offset: usize,
    shape: Vec<usize>,
}

impl Span {
    fn count(&self) -> usize {
        self.shape.iter().product()
    }

    fn end(&self) -> usize {
        self.offset + 4 * self.count()
    }
}

enum Proto {
    Conv {
        stride: usize,
        padding: usize,
        weights: Span,
        bias: Span,
    },
    Dense {
        weights: Span,
        bias: Span,
    },
    Plain(LayerKind),
}

fn param(layer: &ManifestLayer, key: &str) -> Result<usize> {
    layer
        .params
        .get(key)
        .copied()
        .ok_or_else(|| Error::format(0, format!("layer {}: missing param {key:?}", layer.name)))
}

fn span(layer: &ManifestLayer, which: &str) -> Result<Span> {
    let (offset, shape) = match which {
        "weight" => (layer.weight_offset, layer.weight_shape.clone()),
        _ => (layer.bias_offset, layer.bias_shape.clone()),
    };
    match (offset, shape) {
        (Some(offset), Some(shape)) if !shape.is_empty() && shape.iter().all(|&d| d > 0) => {
            Ok(Span { offset, shape })
        }
        (Some(_), Some(shape)) => Err(Error::shape(format!(
            "layer {}: invalid {which} shape {shape:?}",
            layer.name
        ))),
        _ => Err(Error::format(
            0,
            format!("layer {}: missing {which}_offset/{which}_shape", layer.name),
        )),
    }
}

fn proto_layers(manifest: &ModelManifest) -> Result<Vec<(String, Proto)>> {
    manifest
        .layers
        .iter()
        .map(|l| {
            let proto = match l.kind.as_str() {
                "conv" => Proto::Conv {
                    stride: param(l, "stride")?,
                    padding: param(l, "padding")?,
                    weights: span(l, "weight")?,
                    bias: span(l, "bias")?,
                },
                "dense" => Proto::Dense {
                    weights: span(l, "weight")?,
                    bias: span(l, "bias")?,
                },
                "relu" => Proto::Plain(LayerKind::Relu),
                "maxpool" => Proto::Plain(LayerKind::MaxPool {
                    size: param(l, "size")?,
                    stride: param(l, "stride")?,
                }),
                "flatten" => Proto::Plain(LayerKind::Flatten),
                "softmax" => Proto::Plain(LayerKind::Softmax),
                other => {
                    return Err(Error::format(
                        0,
                        format!("layer {}: unknown kind {other:?}", l.name),
                    ))
                }
            };
            Ok((l.name.clone(), proto))
        })
        .collect()
}

fn materialize(
    manifest: &ModelManifest,
    protos: &[(String, Proto)],
    mut fetch: impl FnMut(&Span) -> Result<Vec<f64>>,
) -> Result<Model> {
    let mut layers = Vec::with_capacity(protos.len());
    for (name, proto) in protos {
        let kind = match proto {
            Proto::Conv {
                stride,
                padding,
                weights,
                bias,
            } => LayerKind::Conv {
                kernels: Tensor::new(weights.shape.clone(), fetch(weights)?)?,
                bias: fetch(bias)?,
                stride: *stride,
                padding: *padding,
            },
            Proto::Dense { weights, bias } => LayerKind::Dense {
                weights: Tensor::new(weights.shape.clone(), fetch(weights)?)?,
                bias: fetch(bias)?,
            },
            Proto::Plain(kind) => kind.clone(),
        };
        layers.push(LayerSpec::new(name.clone(), kind));
    }
    Model::new(layers, manifest.input_shape, manifest.class_count)
}

/// Checks span layout and shapes using the manifest alone; returns the
/// number of blob bytes the manifest requires.
fn check_layout(manifest: &ModelManifest, protos: &[(String, Proto)]) -> Result<usize> {
    let mut cursor = 0usize;
    let mut total = 0usize;
    for (name, proto) in protos {
        let spans: Vec<&Span> = match proto {
            Proto::Conv { weights, bias, .. } | Proto::Dense { weights, bias } => {
                vec![weights, bias]
            }
            Proto::Plain(_) => continue,
        };
        for s in spans {
            if s.offset % 4 != 0 {
                return Err(Error::format(
                    0,
                    format!("layer {name}: offset {} not 4-aligned", s.offset),
                ));
            }
            if s.offset < cursor {
                return Err(Error::format(
                    0,
                    format!(
                        "layer {name}: offset {} overlaps previous span ending at {cursor}",
                        s.offset
                    ),
                ));
            }
            cursor = s.end();
            total += 4 * s.count();
        }
    }
    if cursor != total {
        return Err(Error::format(
            0,
            format!("weight spans leave gaps ({cursor} bytes spanned, {total} declared)"),
        ));
    }
    // Shape inference with placeholder weights, before any blob access.
    materialize(manifest, protos, |s| Ok(vec![0.0; s.count()]))?;
    Ok(total)
}

/// Builds a model from manifest JSON and blob bytes.
pub fn decode(json: &str, blob: &[u8]) -> Result<Model> {
    let manifest = parse_manifest(json)?;
    let protos = proto_layers(&manifest)?;
    let expected = check_layout(&manifest, &protos)?;
    if blob.len() != expected {
        return Err(Error::Length {
            expected,
            actual: blob.len(),
        });
    }
    materialize(&manifest, &protos, |s| {
        Ok(blob[s.offset..s.end()]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    })
}

pub fn load_model(
    manifest_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<Model> {
    let manifest_path = manifest_path.as_ref();
    let weights_path = weights_path.as_ref();
    let json = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    // Validate the manifest on its own before reading the blob.
    let manifest = parse_manifest(&json)?;
    check_layout(&manifest, &proto_layers(&manifest)?)?;
    let blob = fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    decode(&json, &blob)
}

pub fn save_model(
    model: &Model,
    manifest_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<()> {
    let (json, blob) = encode(model)?;
    let manifest_path = manifest_path.as_ref();
    let weights_path = weights_path.as_ref();
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    fs::write(weights_path, blob).map_err(|e| Error::io(weights_path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// `conv(4@3x3) → relu → maxpool(2) → flatten → dense(classes) → softmax`
    /// on a `1×16×16` input, with seeded Gaussian weights.
    Random { seed: u64, classes: usize },
    /// Hand-built two-class bright-square detector on a `1×32×32` input.
    Detector,
}

pub const DETECTOR_SIDE: usize = 32;
pub const DETECTOR_SQUARE: usize = 8;
const DETECTOR_CLASS0_WEIGHT: f64 = 1.0 / 64.0;
const DETECTOR_BIAS: [f64; 2] = [-0.25, 0.25];

pub fn build_fixture(kind: &FixtureKind) -> Result<Model> {
    match *kind {
        FixtureKind::Random { seed, classes } => random_fixture(seed, classes),
        FixtureKind::Detector => detector_fixture(),
    }
}

fn random_fixture(seed: u64, classes: usize) -> Result<Model> {
    if !(2..=10).contains(&classes) {
        return Err(Error::param(format!(
            "random fixture supports 2..=10 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, std: f64| -> Vec<f64> {
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    };
    let kernels = Tensor::new(vec![4, 1, 3, 3], draw(36, 1.0 / 3.0))?;
    let conv_bias = draw(4, 0.1);
    let weights = Tensor::new(vec![classes, 196], draw(classes * 196, 0.1))?;
    let dense_bias = draw(classes, 0.1);
    let layers = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv {
                kernels,
                bias: conv_bias,
                stride: 1,
                padding: 0,
            },
        ),
        LayerSpec::new("relu1", LayerKind::Relu),
        LayerSpec::new("pool1", LayerKind::MaxPool { size: 2, stride: 2 }),
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new(
            "fc",
            LayerKind::Dense {
                weights,
                bias: dense_bias,
            },
        ),
        LayerSpec::new("softmax", LayerKind::Softmax),
    ];
    Model::new(layers, [1, 16, 16], classes)
}

/// Filter 0 is a 3×3 box mean, so it responds only where the image is
/// bright. Filter 1 is a horizontal gradient. The tail is linear: class 0
/// sums feature map 0 with a uniform weight, class 1 ignores everything.
fn detector_fixture() -> Result<Model> {
    let side = DETECTOR_SIDE;
    let mut kernels = vec![1.0 / 9.0; 9];
    kernels.extend([-1.0, 0.0, 1.0].repeat(3).into_iter().map(|v| v / 3.0));
    let plane = side * side;
    let mut weights = vec![0.0; 2 * 2 * plane];
    weights[..plane].fill(DETECTOR_CLASS0_WEIGHT);
    let layers = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv {
                kernels: Tensor::new(vec![2, 1, 3, 3], kernels)?,
                bias: vec![0.0, 0.0],
                stride: 1,
                padding: 1,
            },
        ),
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new(
            "fc",
            LayerKind::Dense {
                weights: Tensor::new(vec![2, 2 * plane], weights)?,
                bias: DETECTOR_BIAS.to_vec(),
            },
        ),
        LayerSpec::new("softmax", LayerKind::Softmax),
    ];
    Model::new(layers, [1, side, side], 2)
}

/// Black `1×32×32` image with a white 8×8 square whose top-left corner is at
/// `(top, left)`.
pub fn detector_input(top: usize, left: usize) -> Result<Tensor> {
    let side = DETECTOR_SIDE;
    if top + DETECTOR_SQUARE > side || left + DETECTOR_SQUARE > side {
        return Err(Error::param(format!(
            "square at ({top},{left}) does not fit a {side}x{side} image"
        )));
    }
    let mut t = Tensor::zeros(&[1, side, side]);
    for r in top..top + DETECTOR_SQUARE {
        t.data_mut()[r * side + left..r * side + left + DETECTOR_SQUARE].fill(1.0);
    }
    Ok(t)
}

/// Seeded uniform `[0, 1)` input matching a model's input shape.
pub fn random_input(model: &Model, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.input_shape();
    let n = shape.iter().product();
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| unit.sample(&mut rng)).collect(),
    )
    .expect("shape matches data")
}
