//! Reverse-mode gradients of a class score with respect to a conv layer's
//! activations or the network input, the closed-form higher-order triple
//! used by Grad-CAM++, and a frozen-gate finite-difference oracle.
//!
//! The reverse sweep replays the recorded trace: ReLU layers pass gradient
//! only where their output was strictly positive (so the derivative at 0 is
//! 0), and maxpool layers route gradient to the recorded argmax.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{argmax, forward, ActivationTrace, LayerKind, Model};
use crate::tensor::{self, Tensor};

/// Which scalar function of the logits is treated as the class score `Y^c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreKind {
    /// `Y = S^c`, the pre-softmax logit.
    RawLogit,
    /// `Y = exp(S^c)`.
    #[default]
    ExpLogit,
    /// `Y = softmax(S)_c`.
    Probability,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::RawLogit => "logit",
            ScoreKind::ExpLogit => "exp",
            ScoreKind::Probability => "probability",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" | "raw-logit" => Ok(ScoreKind::RawLogit),
            "exp" | "exp-logit" => Ok(ScoreKind::ExpLogit),
            "probability" | "prob" => Ok(ScoreKind::Probability),
            other => Err(Error::param(format!("unknown score mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ClassTarget {
    /// Highest logit of the un-noised forward pass.
    #[default]
    Auto,
    Index(usize),
}

impl fmt::Display for ClassTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassTarget::Auto => f.write_str("auto"),
            ClassTarget::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for ClassTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ClassTarget::Auto);
        }
        s.parse()
            .map(ClassTarget::Index)
            .map_err(|_| Error::param(format!("class must be an index or \"auto\", got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ScoreMode {
    pub kind: ScoreKind,
    pub class: ClassTarget,
}

impl ScoreMode {
    pub fn new(kind: ScoreKind, class: ClassTarget) -> Self {
        ScoreMode { kind, class }
    }

    pub fn raw_logit(class: usize) -> Self {
        Self::new(ScoreKind::RawLogit, ClassTarget::Index(class))
    }

    pub fn exp_logit(class: usize) -> Self {
        Self::new(ScoreKind::ExpLogit, ClassTarget::Index(class))
    }

    pub fn probability(class: usize) -> Self {
        Self::new(ScoreKind::Probability, ClassTarget::Index(class))
    }

    /// Concrete class index: the explicit one, or argmax of `logits`.
    pub fn resolve_class(&self, logits: &[f64]) -> Result<usize> {
        match self.class {
            ClassTarget::Auto => Ok(argmax(logits)),
            ClassTarget::Index(c) if c < logits.len() => Ok(c),
            ClassTarget::Index(c) => Err(Error::param(format!(
                "class {c} out of range for {} classes",
                logits.len()
            ))),
        }
    }

    /// Same mode with the class pinned.
    pub fn pinned(&self, class: usize) -> Self {
        Self::new(self.kind, ClassTarget::Index(class))
    }

    pub fn value(&self, logits: &[f64]) -> Result<f64> {
        let c = self.resolve_class(logits)?;
        Ok(match self.kind {
            ScoreKind::RawLogit => logits[c],
            ScoreKind::ExpLogit => logits[c].exp(),
            ScoreKind::Probability => tensor::softmax(logits)[c],
        })
    }

    /// `dY/dS` over all logits.
    fn logit_grad(&self, logits: &[f64]) -> Result<Vec<f64>> {
        let c = self.resolve_class(logits)?;
        let mut seed = vec![0.0; logits.len()];
        match self.kind {
            ScoreKind::RawLogit => seed[c] = 1.0,
            ScoreKind::ExpLogit => seed[c] = logits[c].exp(),
            ScoreKind::Probability => {
                let p = tensor::softmax(logits);
                for (j, s) in seed.iter_mut().enumerate() {
                    let delta = if j == c { 1.0 } else { 0.0 };
                    *s = p[c] * (delta - p[j]);
                }
            }
        }
        Ok(seed)
    }
}

/// First, second and third derivatives of the class score with respect to
/// one activation stack, all shaped `[K,h,w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTriple {
    pub d1: Tensor,
    pub d2: Tensor,
    pub d3: Tensor,
}

impl GradientTriple {
    pub fn new(d1: Tensor, d2: Tensor, d3: Tensor) -> Result<Self> {
        if d1.shape() != d2.shape() || d1.shape() != d3.shape() {
            return Err(Error::shape(format!(
                "triple members disagree: {:?} {:?} {:?}",
                d1.shape(),
                d2.shape(),
                d3.shape()
            )));
        }
        Ok(GradientTriple { d1, d2, d3 })
    }

    pub fn shape(&self) -> &[usize] {
        self.d1.shape()
    }

    pub fn scale(&self, factor: f64) -> GradientTriple {
        GradientTriple {
            d1: self.d1.scale(factor),
            d2: self.d2.scale(factor),
            d3: self.d3.scale(factor),
        }
    }
}

/// Backpropagates `grad` (w.r.t. the output of layer `from`) down to the
/// output of layer `to`, or to the network input when `to` is `None`.
fn backprop(
    model: &Model,
    trace: &ActivationTrace,
    from: usize,
    to: Option<usize>,
    mut grad: Tensor,
) -> Result<Tensor> {
    let stop = to.map_or(0, |t| t + 1);
    for i in (stop..=from).rev() {
        let input = trace.layer_input(i);
        grad = match &model.layers()[i].kind {
            LayerKind::Conv {
                kernels,
                stride,
                padding,
                ..
            } => tensor::conv2d_input_grad(&grad, kernels, input.shape(), *stride, *padding)?,
            LayerKind::Relu => {
                grad.zip_map(&trace.outputs[i], |g, y| if y > 0.0 { g } else { 0.0 })?
            }
            LayerKind::MaxPool { .. } => {
                let winners = trace.pool_argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::shape("trace lacks pool indices"))?;
                let mut dx = Tensor::zeros(input.shape());
                let buf = dx.data_mut();
                for (&src, &g) in winners.iter().zip(grad.data()) {
                    buf[src] += g;
                }
                dx
            }
            LayerKind::Flatten => grad.reshape(input.shape())?,
            LayerKind::Dense { weights, .. } => {
                let (m, n) = (weights.shape()[0], weights.shape()[1]);
                let w = weights.data();
                let g = grad.data();
                let mut dx = vec![0.0; n];
                for r in 0..m {
                    let row = &w[r * n..(r + 1) * n];
                    for (d, &wv) in dx.iter_mut().zip(row) {
                        *d += g[r] * wv;
                    }
                }
                Tensor::vector(dx)?
            }
            LayerKind::Softmax => {
                return Err(Error::shape("cannot backpropagate through softmax"));
            }
        };
    }
    Ok(grad)
}

fn check_trace(model: &Model, trace: &ActivationTrace) -> Result<()> {
    if trace.outputs.len() != model.layers().len() {
        return Err(Error::shape("trace does not belong to this model"));
    }
    Ok(())
}

/// `∂Y^c/∂A` for the named conv layer's output `A`.
pub fn grad_wrt_layer(
    model: &Model,
    trace: &ActivationTrace,
    score: &ScoreMode,
    layer: &str,
) -> Result<Tensor> {
    let target = model.conv_layer_index(layer)?;
    check_trace(model, trace)?;
    let seed = Tensor::vector(score.logit_grad(&trace.logits)?)?;
    backprop(model, trace, model.logit_layer(), Some(target), seed)
}

/// Sensitivity map: `∂Y^c/∂x` for the input `x`.
pub fn grad_wrt_input(model: &Model, input: &Tensor, score: &ScoreMode) -> Result<Tensor> {
    let trace = forward(model, input)?;
    grad_wrt_input_from_trace(model, &trace, score)
}

pub fn grad_wrt_input_from_trace(
    model: &Model,
    trace: &ActivationTrace,
    score: &ScoreMode,
) -> Result<Tensor> {
    check_trace(model, trace)?;
    let seed = Tensor::vector(score.logit_grad(&trace.logits)?)?;
    backprop(model, trace, model.logit_layer(), None, seed)
}

/// Closed-form derivative triple from the raw-logit gradient `g`.
///
/// The tail after a conv layer is piecewise linear, so `∂²S/∂A² = 0`. For
/// `Y = exp(S)` every higher derivative is then `exp(S)·g^k`; for `Y = S`
/// they vanish.
pub fn higher_order_triple(g: &Tensor, logit: f64, kind: ScoreKind) -> Result<GradientTriple> {
    match kind {
        ScoreKind::RawLogit => GradientTriple::new(
            g.clone(),
            Tensor::zeros(g.shape()),
            Tensor::zeros(g.shape()),
        ),
        ScoreKind::ExpLogit => {
            let e = logit.exp();
            GradientTriple::new(
                g.map(|v| e * v),
                g.map(|v| e * v * v),
                g.map(|v| e * v * v * v),
            )
        }
        ScoreKind::Probability => Err(Error::Unsupported(
            "higher-order derivatives are only defined for the logit and exp-logit scores".into(),
        )),
    }
}

/// Runs layers `from..=logit_layer` on `x` with ReLU gates and pool winners
/// taken from `trace`, returning the logits.
fn frozen_tail(model: &Model, trace: &ActivationTrace, from: usize, x: Tensor) -> Result<Vec<f64>> {
    let mut cur = x;
    for i in from..=model.logit_layer() {
        cur = match &model.layers()[i].kind {
            LayerKind::Conv {
                kernels,
                bias,
                stride,
                padding,
            } => tensor::conv2d(&cur, kernels, bias, *stride, *padding)?,
            LayerKind::Relu => {
                cur.zip_map(&trace.outputs[i], |v, y| if y > 0.0 { v } else { 0.0 })?
            }
            LayerKind::MaxPool { .. } => {
                let winners = trace.pool_argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::shape("trace lacks pool indices"))?;
                let picked = winners.iter().map(|&j| cur.data()[j]).collect();
                Tensor::new(trace.outputs[i].shape().to_vec(), picked)?
            }
            LayerKind::Flatten => cur.reshape(&[cur.len()])?,
            LayerKind::Dense { weights, bias } => {
                Tensor::vector(tensor::dense(cur.data(), weights, bias)?)?
            }
            LayerKind::Softmax => unreachable!("logit layer precedes softmax"),
        };
    }
    Ok(cur.into_data())
}

fn central_difference(
    base: &Tensor,
    h: f64,
    score: &ScoreMode,
    mut eval: impl FnMut(Tensor) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::param(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut out = Vec::with_capacity(base.len());
    for idx in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[idx] += h;
        let mut minus = base.clone();
        minus.data_mut()[idx] -= h;
        let up = score.value(&eval(plus)?)?;
        let down = score.value(&eval(minus)?)?;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(base.shape().to_vec(), out)
}

/// Central-difference estimate of `∂Y^c/∂A` with gates frozen at the trace.
pub fn finite_diff_layer_grad(
    model: &Model,
    trace: &ActivationTrace,
    score: &ScoreMode,
    layer: &str,
    h: f64,
) -> Result<Tensor> {
    let target = model.conv_layer_index(layer)?;
    check_trace(model, trace)?;
    let score = score.pinned(score.resolve_class(&trace.logits)?);
    central_difference(&trace.outputs[target], h, &score, |a| {
        frozen_tail(model, trace, target + 1, a)
    })
}

/// Central-difference estimate of `∂Y^c/∂x` with gates frozen at the trace.
pub fn finite_diff_input_grad(
    model: &Model,
    trace: &ActivationTrace,
    score: &ScoreMode,
    h: f64,
) -> Result<Tensor> {
    check_trace(model, trace)?;
    let score = score.pinned(score.resolve_class(&trace.logits)?);
    central_difference(&trace.input, h, &score, |x| frozen_tail(model, trace, 0, x))
}

/// Largest `|a − b| / max(|a|, |b|)` over entries where `|a| > floor`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
