//! Dense row-major `f64` tensors and the forward primitives the network needs.
//!
//! Every operation here is a pure function: inputs are borrowed, outputs are
//! freshly allocated. Shapes are checked up front and reported as
//! [`Error::Shape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense N-d array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dims must be positive"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// 1-d tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// 2-d tensor from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("ragged matrix rows"));
        }
        Self::new(vec![h, w], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Element at a 2-d index. Panics on rank mismatch or out-of-range index.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Element at a 3-d index. Panics on rank mismatch or out-of-range index.
    pub fn at3(&self, c: usize, row: usize, col: usize) -> f64 {
        assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + row) * self.shape[2] + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C,H,W] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "expected a [H,W] matrix, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Output spatial size of a convolution, or an error when the window does not
/// tile the padded input exactly.
pub fn conv_output_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv stride must be positive"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "({input} + 2*{padding} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// 2-d cross-correlation with zero padding.
///
/// `input` is `[C,H,W]`, `kernels` is `[K,C,kh,kw]`, `bias` has `K` entries.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (k, kc, kh, kw) = kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::shape(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    if bias.len() != k {
        return Err(Error::shape(format!(
            "bias has {} entries for {k} kernels",
            bias.len()
        )));
    }
    let oh = conv_output_dim(h, kh, stride, padding)?;
    let ow = conv_output_dim(w, kw, stride, padding)?;
    let x = input.data();
    let wt = kernels.data();
    let mut out = vec![0.0; k * oh * ow];
    for f in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[f];
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((f * c + ch) * kh + ky) * kw + kx]
                                * x[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out)
}

/// Gradient of a conv2d output with respect to its input (the transposed
/// convolution). `input_shape` is the `[C,H,W]` shape of the forward input.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (k, c, kh, kw) = kernel_dims(kernels)?;
    let [ic, h, w] = *input_shape else {
        return Err(Error::shape("conv input shape must be [C,H,W]"));
    };
    if ic != c {
        return Err(Error::shape("kernel/input channel mismatch"));
    }
    let oh = conv_output_dim(h, kh, stride, padding)?;
    let ow = conv_output_dim(w, kw, stride, padding)?;
    grad_out.expect_shape(&[k, oh, ow])?;
    let g = grad_out.data();
    let wt = kernels.data();
    let mut dx = vec![0.0; c * h * w];
    for f in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(f * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(ch * h + iy as usize) * w + ix as usize] +=
                                go * wt[((f * c + ch) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

fn kernel_dims(kernels: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernels.shape()[..] {
        [k, c, kh, kw] => Ok((k, c, kh, kw)),
        _ => Err(Error::shape(format!(
            "kernels must be [K,C,kh,kw], got {:?}",
            kernels.shape()
        ))),
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// Max pooling result plus, for every output element, the flat index of the
/// input element that won its window.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Windowed maximum over each channel. Ties go to the first element in
/// row-major window order.
pub fn maxpool2d(t: &Tensor, size: usize, stride: usize) -> Result<Pooled> {
    let (c, h, w) = t.dims3()?;
    if size == 0 || stride == 0 {
        return Err(Error::shape("pool size and stride must be positive"));
    }
    if h < size || w < size {
        return Err(Error::shape(format!(
            "pool window {size} larger than input {h}x{w}"
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let x = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![c, oh, ow], out)?,
        argmax,
    })
}

/// Affine map `weights · x + bias` with `weights` shaped `[M,N]`.
pub fn dense(x: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = weights.dims2()?;
    if x.len() != n {
        return Err(Error::shape(format!(
            "dense expects {n} inputs, got {}",
            x.len()
        )));
    }
    if bias.len() != m {
        return Err(Error::shape(format!(
            "dense bias has {} entries for {m} outputs",
            bias.len()
        )));
    }
    Ok(weights
        .data()
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `t + ε` with `ε ~ N(0, sigma²)` drawn independently per element,
/// in row-major order from `rng`. `sigma` is absolute. `sigma == 0` returns
/// an exact copy without consuming randomness.
pub fn add_gaussian_noise<R: Rng + ?Sized>(t: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::param(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(t.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    Ok(Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| x + normal.sample(rng)).collect(),
    })
}

/// Bilinear resize of a `[h,w]` matrix using half-pixel centres.
pub fn bilinear_resize(map: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let ys: Vec<(usize, usize, f64)> = (0..target_h).map(|d| sample_axis(d, h, target_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..target_w).map(|d| sample_axis(d, w, target_w)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![target_h, target_w], out)
}

fn sample_axis(dst: usize, src_dim: usize, dst_dim: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * (src_dim as f64 / dst_dim as f64) - 0.5)
        .clamp(0.0, (src_dim - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_dim - 1);
    (lo, hi, s - lo as f64)
}
