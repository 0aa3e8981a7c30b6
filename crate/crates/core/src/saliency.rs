//! Saliency maps: sensitivity, SmoothGrad, Grad-CAM, Grad-CAM++ and
//! Smooth Grad-CAM++, plus feature-map and neuron selection.
//!
//! Smooth Grad-CAM++ averages the derivative triple `(D1, D2, D3)` over `n`
//! Gaussian-perturbed copies of the input, then feeds the averages through
//! the Grad-CAM++ coefficient and weight formulas:
//!
//! ```text
//! alpha[k,i,j] = avgD1 / (2·avgD2 + (Σ_ab A[k,a,b])·avgD3)
//! W[k]         = Σ_ij alpha[k,i,j] · relu(avgD1[k,i,j])
//! L            = relu(Σ_k W[k]·A[k])
//! ```
//!
//! Per-sample noise comes from a ChaCha8 generator seeded with the request
//! seed and switched to stream `sample_index`, so samples can be computed in
//! any order (or in parallel) and still reduce to the same bytes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradients::{
    grad_wrt_input_from_trace, grad_wrt_layer, higher_order_triple, GradientTriple, ScoreKind,
    ScoreMode,
};
use crate::network::{forward, list_conv_layers, Model};
use crate::tensor::{add_gaussian_noise, bilinear_resize, Tensor};

pub const DEFAULT_SAMPLES: usize = 25;
pub const DEFAULT_SIGMA_REL: f64 = 0.15;

/// `|denominator|` below this makes alpha zero.
pub const ALPHA_DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    Sensitivity,
    SmoothGrad,
    GradCam,
    GradCamPlusPlus,
    #[default]
    SmoothGradCamPlusPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Sensitivity,
        Method::SmoothGrad,
        Method::GradCam,
        Method::GradCamPlusPlus,
        Method::SmoothGradCamPlusPlus,
    ];

    pub fn is_cam(self) -> bool {
        matches!(
            self,
            Method::GradCam | Method::GradCamPlusPlus | Method::SmoothGradCamPlusPlus
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sensitivity => "sensitivity",
            Method::SmoothGrad => "smoothgrad",
            Method::GradCam => "gradcam",
            Method::GradCamPlusPlus => "gradcampp",
            Method::SmoothGradCamPlusPlus => "smooth-gradcampp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown method {s:?}")))
    }
}

/// Which forward pass supplies the activations `A` used in the map and in
/// the alpha denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ActivationSource {
    /// The un-noised input.
    #[default]
    Original,
    /// Elementwise mean over the noised samples.
    Averaged,
}

impl fmt::Display for ActivationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationSource::Original => "original",
            ActivationSource::Averaged => "averaged",
        })
    }
}

impl FromStr for ActivationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(ActivationSource::Original),
            "averaged" => Ok(ActivationSource::Averaged),
            other => Err(Error::param(format!("unknown activation source {other:?}"))),
        }
    }
}

/// Spatial neurons kept in every feature map; everything else is zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NeuronSelection {
    /// Individual `(row, col)` positions.
    Coords(Vec<(usize, usize)>),
    /// Inclusive rectangle `top..=bottom` × `left..=right`.
    Region {
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    },
}

impl NeuronSelection {
    /// 0/1 mask over an `h × w` grid.
    pub fn mask(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; h * w];
        match self {
            NeuronSelection::Coords(coords) => {
                for &(r, c) in coords {
                    if r >= h || c >= w {
                        return Err(Error::param(format!(
                            "neuron ({r},{c}) outside {h}x{w} feature map"
                        )));
                    }
                    mask[r * w + c] = true;
                }
            }
            &NeuronSelection::Region {
                top,
                left,
                bottom,
                right,
            } => {
                if top > bottom || left > right || bottom >= h || right >= w {
                    return Err(Error::param(format!(
                        "region {top}:{left}:{bottom}:{right} invalid for {h}x{w} feature map"
                    )));
                }
                for r in top..=bottom {
                    mask[r * w + left..=r * w + right].fill(true);
                }
            }
        }
        Ok(mask)
    }
}

impl fmt::Display for NeuronSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeuronSelection::Coords(coords) => {
                let parts: Vec<String> = coords.iter().map(|(r, c)| format!("{r}:{c}")).collect();
                write!(f, "neurons={}", parts.join(","))
            }
            NeuronSelection::Region {
                top,
                left,
                bottom,
                right,
            } => write!(f, "region_box={top}:{left}:{bottom}:{right}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRequest {
    pub method: Method,
    pub score: ScoreMode,
    /// Target conv layer; `None` picks the last conv layer.
    pub layer: Option<String>,
    pub samples: usize,
    /// Noise std as a fraction of the input's `max − min`.
    pub sigma_rel: f64,
    pub filters: Option<Vec<usize>>,
    pub neurons: Option<NeuronSelection>,
    pub activation_source: ActivationSource,
    pub seed: u64,
}

impl Default for SaliencyRequest {
    fn default() -> Self {
        SaliencyRequest {
            method: Method::default(),
            score: ScoreMode::default(),
            layer: None,
            samples: DEFAULT_SAMPLES,
            sigma_rel: DEFAULT_SIGMA_REL,
            filters: None,
            neurons: None,
            activation_source: ActivationSource::default(),
            seed: 0,
        }
    }
}

impl SaliencyRequest {
    pub fn new(method: Method) -> Self {
        SaliencyRequest {
            method,
            ..Default::default()
        }
    }

    /// Sample count and relative sigma after method-specific overrides:
    /// the unsmoothed methods always use one clean sample.
    pub fn effective_smoothing(&self) -> (usize, f64) {
        match self.method {
            Method::SmoothGrad | Method::SmoothGradCamPlusPlus => (self.samples, self.sigma_rel),
            _ => (1, 0.0),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::param("sample count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.sigma_rel) {
            return Err(Error::param(format!(
                "relative sigma must lie in [0, 1), got {}",
                self.sigma_rel
            )));
        }
        Ok(())
    }

    /// Name of the conv layer a CAM method will use.
    pub fn resolve_layer(&self, model: &Model) -> Result<String> {
        match &self.layer {
            Some(name) => {
                model.conv_layer_index(name)?;
                Ok(name.clone())
            }
            None => list_conv_layers(model)
                .pop()
                .ok_or_else(|| Error::param("model has no conv layer")),
        }
    }
}

/// Per-location Grad-CAM++ coefficients, `[K,h,w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap(pub Tensor);

/// One weight per feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

/// Everything that determined a map, echoed back with it.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMeta {
    pub method: Method,
    pub class: usize,
    pub score_kind: ScoreKind,
    /// Class score of the un-noised input under `score_kind`.
    pub class_score: f64,
    pub layer: Option<String>,
    pub samples: usize,
    pub sigma_rel: f64,
    pub filters: Option<Vec<usize>>,
    pub neurons: Option<NeuronSelection>,
    pub activation_source: ActivationSource,
    pub seed: u64,
}

impl fmt::Display for MapMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "method={} class={} score={} class_score={:e} layer={} samples={} sigma={} seed={}",
            self.method,
            self.class,
            self.score_kind,
            self.class_score,
            self.layer.as_deref().unwrap_or("-"),
            self.samples,
            self.sigma_rel,
            self.seed,
        )?;
        if let Some(filters) = &self.filters {
            let parts: Vec<String> = filters.iter().map(usize::to_string).collect();
            write!(f, " filters={}", parts.join(","))?;
        }
        if let Some(sel) = &self.neurons {
            write!(f, " {sel}")?;
        }
        write!(f, " activation_source={}", self.activation_source)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Non-negative map at feature-map resolution (CAM) or input resolution
    /// (gradient methods).
    pub raw: Tensor,
    /// `raw` resized to the input and min-max normalized into `[0, 1]`.
    pub display: Tensor,
    /// Averaged input gradient `[C,H,W]` for the gradient methods.
    pub gradient: Option<Tensor>,
    pub meta: MapMeta,
}

/// Noise generator for one sample.
pub fn sample_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

fn dynamic_range(input: &Tensor) -> f64 {
    input.max() - input.min()
}

fn noised(input: &Tensor, sigma_abs: f64, seed: u64, sample: usize) -> Result<Tensor> {
    add_gaussian_noise(input, sigma_abs, &mut sample_rng(seed, sample))
}

fn mean_in_order(items: impl IntoIterator<Item = Tensor>, n: usize) -> Result<Tensor> {
    let mut iter = items.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::param("nothing to average"))?;
    for t in iter {
        acc = acc.zip_map(&t, |a, b| a + b)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

/// Noise-averaged derivative triple for `request.layer`, plus the activation
/// stack `A` to pair it with.
///
/// `request.score.class` should already be pinned; `Auto` is resolved against
/// the un-noised input here.
pub fn smooth_triple(
    model: &Model,
    input: &Tensor,
    request: &SaliencyRequest,
) -> Result<(GradientTriple, Tensor)> {
    request.check()?;
    let layer = request.resolve_layer(model)?;
    let index = model.conv_layer_index(&layer)?;
    let clean = forward(model, input)?;
    let class = request.score.resolve_class(&clean.logits)?;
    let raw_score = ScoreMode::raw_logit(class);
    let sigma_abs = request.sigma_rel * dynamic_range(input);

    let per_sample: Vec<(GradientTriple, Tensor)> = (0..request.samples)
        .into_par_iter()
        .map(|s| {
            let x = noised(input, sigma_abs, request.seed, s)?;
            let trace = forward(model, &x)?;
            let g = grad_wrt_layer(model, &trace, &raw_score, &layer)?;
            let triple = higher_order_triple(&g, trace.logits[class], request.score.kind)?;
            Ok((triple, trace.outputs[index].clone()))
        })
        .collect::<Result<_>>()?;

    let n = request.samples;
    let (triples, activations): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    let mut d3 = Vec::with_capacity(n);
    for t in triples {
        d1.push(t.d1);
        d2.push(t.d2);
        d3.push(t.d3);
    }
    let avg = GradientTriple::new(
        mean_in_order(d1, n)?,
        mean_in_order(d2, n)?,
        mean_in_order(d3, n)?,
    )?;
    let a = match request.activation_source {
        ActivationSource::Original => clean.outputs[index].clone(),
        ActivationSource::Averaged => mean_in_order(activations, n)?,
    };
    Ok((avg, a))
}

/// Grad-CAM++ coefficients from averaged derivatives and activations.
pub fn compute_alpha(avg: &GradientTriple, activations: &Tensor) -> Result<AlphaMap> {
    activations.expect_shape(avg.shape())?;
    let (k, h, w) = activations.dims3()?;
    let plane = h * w;
    let mut alpha = Vec::with_capacity(k * plane);
    for map in 0..k {
        let span = map * plane..(map + 1) * plane;
        let total: f64 = activations.data()[span.clone()].iter().sum();
        let d1 = &avg.d1.data()[span.clone()];
        let d2 = &avg.d2.data()[span.clone()];
        let d3 = &avg.d3.data()[span];
        for i in 0..plane {
            let den = 2.0 * d2[i] + total * d3[i];
            alpha.push(if den.abs() < ALPHA_DENOMINATOR_FLOOR {
                0.0
            } else {
                d1[i] / den
            });
        }
    }
    Ok(AlphaMap(Tensor::new(vec![k, h, w], alpha)?))
}

/// `W[k] = Σ_ij alpha · relu(avgD1)`.
pub fn gradcampp_weights(alpha: &AlphaMap, avg_d1: &Tensor) -> Result<WeightVector> {
    alpha.0.expect_shape(avg_d1.shape())?;
    let (k, h, w) = avg_d1.dims3()?;
    let terms = alpha.0.zip_map(avg_d1, |a, d| a * d.max(0.0))?;
    Ok(WeightVector(
        terms
            .data()
            .chunks_exact(h * w)
            .take(k)
            .map(|c| c.iter().sum())
            .collect(),
    ))
}

/// Global-average-pooled gradient per feature map.
pub fn gradcam_weights(g: &Tensor) -> Result<WeightVector> {
    let (_, h, w) = g.dims3()?;
    let area = (h * w) as f64;
    Ok(WeightVector(
        g.data()
            .chunks_exact(h * w)
            .map(|c| c.iter().sum::<f64>() / area)
            .collect(),
    ))
}

/// `relu(Σ_k W[k]·A[k])`, summing only over `filters` when given.
pub fn cam_map(
    weights: &WeightVector,
    activations: &Tensor,
    filters: Option<&[usize]>,
) -> Result<Tensor> {
    let (k, h, w) = activations.dims3()?;
    if weights.0.len() != k {
        return Err(Error::shape(format!(
            "{} weights for {k} feature maps",
            weights.0.len()
        )));
    }
    let all: Vec<usize>;
    let selected = match filters {
        Some(f) => {
            if let Some(&bad) = f.iter().find(|&&i| i >= k) {
                return Err(Error::param(format!(
                    "filter index {bad} out of range for {k} feature maps"
                )));
            }
            f
        }
        None => {
            all = (0..k).collect();
            &all
        }
    };
    let plane = h * w;
    let mut acc = vec![0.0; plane];
    for &map in selected {
        let wk = weights.0[map];
        for (a, &v) in acc
            .iter_mut()
            .zip(&activations.data()[map * plane..(map + 1) * plane])
        {
            *a += wk * v;
        }
    }
    Tensor::new(vec![h, w], acc.into_iter().map(|v| v.max(0.0)).collect())
}

/// Zeroes every activation and derivative outside the selected neurons.
pub fn apply_selection(
    activations: &Tensor,
    triple: &GradientTriple,
    selection: &NeuronSelection,
) -> Result<(Tensor, GradientTriple)> {
    activations.expect_shape(triple.shape())?;
    let (_, h, w) = activations.dims3()?;
    let mask = selection.mask(h, w)?;
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if !mask[i % (h * w)] {
                *v = 0.0;
            }
        }
        out
    };
    Ok((
        apply(activations),
        GradientTriple::new(apply(&triple.d1), apply(&triple.d2), apply(&triple.d3))?,
    ))
}

/// Resize to the input resolution and min-max normalize into `[0, 1]`.
/// A constant map normalizes to all zeros.
pub fn postprocess(raw: &Tensor, input_h: usize, input_w: usize) -> Result<Tensor> {
    let resized = bilinear_resize(raw, input_h, input_w)?;
    let (lo, hi) = (resized.min(), resized.max());
    if hi > lo {
        Ok(resized.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
    } else {
        Ok(Tensor::zeros(resized.shape()))
    }
}

fn channel_max_abs(g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&g.data()[ch * plane..(ch + 1) * plane]) {
            *o = o.max(v.abs());
        }
    }
    Tensor::new(vec![h, w], out)
}

struct Resolved {
    class: usize,
    score: ScoreMode,
    class_score: f64,
}

fn resolve(
    model: &Model,
    input: &Tensor,
    request: &SaliencyRequest,
) -> Result<(Resolved, crate::network::ActivationTrace)> {
    let clean = forward(model, input)?;
    let class = request.score.resolve_class(&clean.logits)?;
    let score = request.score.pinned(class);
    let class_score = score.value(&clean.logits)?;
    Ok((
        Resolved {
            class,
            score,
            class_score,
        },
        clean,
    ))
}

fn meta(request: &SaliencyRequest, resolved: &Resolved, layer: Option<String>) -> MapMeta {
    let (samples, sigma_rel) = request.effective_smoothing();
    MapMeta {
        method: request.method,
        class: resolved.class,
        score_kind: request.score.kind,
        class_score: resolved.class_score,
        layer,
        samples,
        sigma_rel,
        filters: request.filters.clone(),
        neurons: request.neurons.clone(),
        activation_source: request.activation_source,
        seed: request.seed,
    }
}

/// Sensitivity / SmoothGrad map: mean input gradient over noised samples,
/// collapsed to one plane by the channelwise maximum of absolute values.
pub fn smoothgrad_map(
    model: &Model,
    input: &Tensor,
    request: &SaliencyRequest,
) -> Result<SaliencyMap> {
    request.check()?;
    if request.method.is_cam() {
        return Err(Error::param(format!(
            "{} is not a gradient method",
            request.method
        )));
    }
    let (resolved, _) = resolve(model, input, request)?;
    let (n, sigma_rel) = request.effective_smoothing();
    let sigma_abs = sigma_rel * dynamic_range(input);
    let grads: Vec<Tensor> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = noised(input, sigma_abs, request.seed, s)?;
            let trace = forward(model, &x)?;
            grad_wrt_input_from_trace(model, &trace, &resolved.score)
        })
        .collect::<Result<_>>()?;
    let gradient = mean_in_order(grads, n)?;
    let raw = channel_max_abs(&gradient)?;
    let [_, h, w] = model.input_shape();
    let display = postprocess(&raw, h, w)?;
    Ok(SaliencyMap {
        raw,
        display,
        gradient: Some(gradient),
        meta: meta(request, &resolved, None),
    })
}

/// Produces the map for any method.
pub fn run(model: &Model, input: &Tensor, request: &SaliencyRequest) -> Result<SaliencyMap> {
    request.check()?;
    if !request.method.is_cam() {
        return smoothgrad_map(model, input, request);
    }
    let layer = request.resolve_layer(model)?;
    let (resolved, clean) = resolve(model, input, request)?;
    let pinned = SaliencyRequest {
        score: resolved.score,
        layer: Some(layer.clone()),
        ..request.clone()
    };

    let raw = match request.method {
        Method::GradCam => {
            let g = grad_wrt_layer(model, &clean, &resolved.score, &layer)?;
            let mut a = clean.get(&layer).expect("conv layer is traced").clone();
            let mut g_sel = g;
            if let Some(sel) = &request.neurons {
                let zeros = Tensor::zeros(a.shape());
                let triple = GradientTriple::new(g_sel, zeros.clone(), zeros)?;
                let (masked_a, masked) = apply_selection(&a, &triple, sel)?;
                a = masked_a;
                g_sel = masked.d1;
            }
            let weights = gradcam_weights(&g_sel)?;
            cam_map(&weights, &a, request.filters.as_deref())?
        }
        Method::GradCamPlusPlus | Method::SmoothGradCamPlusPlus => {
            let (samples, sigma_rel) = request.effective_smoothing();
            let smoothing = SaliencyRequest {
                samples,
                sigma_rel,
                ..pinned
            };
            let (mut triple, mut a) = smooth_triple(model, input, &smoothing)?;
            if let Some(sel) = &request.neurons {
                (a, triple) = apply_selection(&a, &triple, sel)?;
            }
            let alpha = compute_alpha(&triple, &a)?;
            let weights = gradcampp_weights(&alpha, &triple.d1)?;
            cam_map(&weights, &a, request.filters.as_deref())?
        }
        Method::Sensitivity | Method::SmoothGrad => unreachable!(),
    };
    let [_, h, w] = model.input_shape();
    let display = postprocess(&raw, h, w)?;
    Ok(SaliencyMap {
        raw,
        display,
        gradient: None,
        meta: meta(request, &resolved, Some(layer)),
    })
}
