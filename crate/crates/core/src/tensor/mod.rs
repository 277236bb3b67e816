//! Dense NCHW tensors and the hand-differentiated layer set used by the detector.
//!
//! Every kernel accumulates in a fixed order, so results are bit-reproducible
//! run to run. Convolution accumulates each output element starting from the
//! bias and then over `(in_channel, ky, kx)` in lexicographic order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
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

    /// Attaches a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `g` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of {} values for tensor of {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected NCHW, got {:?}", self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

mod conv;
mod gemm;

pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_raw, conv2d_forward_raw, ConvGeometry, ConvGrads,
};

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.grad = None;
    relu_inplace(y.data_mut());
    y
}

pub fn relu_inplace(v: &mut [f64]) {
    for e in v {
        *e = e.max(0.0);
    }
}

/// Masks `grad` in place by the ReLU output (`> 0` passes).
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    g.grad = None;
    relu_backward_inplace(output.data(), g.data_mut());
    g
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.shape());
    for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
        *o = math::sigmoid(*v);
    }
    y
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(output.shape());
    for ((d, y), go) in g
        .data_mut()
        .iter_mut()
        .zip(output.data())
        .zip(grad_out.data())
    {
        *d = go * y * (1.0 - y);
    }
    g
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2x_nearest(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for yy in 0..2 * h {
            let srow = &sp[(yy / 2) * w..(yy / 2 + 1) * w];
            let drow = &mut dp[yy * 2 * w..(yy + 1) * 2 * w];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`upsample2x_nearest`]: sums each 2x2 block.
pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = grad_out.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Shape(format!("odd upsampled dims {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Tensor::zeros(&[n, c, h, w]);
    let src = grad_out.data();
    let dst = g.data_mut();
    for plane in 0..n * c {
        let sp = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dp = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = sp[2 * y * w2 + 2 * x] + sp[2 * y * w2 + 2 * x + 1];
                let b = sp[(2 * y + 1) * w2 + 2 * x] + sp[(2 * y + 1) * w2 + 2 * x + 1];
                dp[y * w + x] = a + b;
            }
        }
    }
    Ok(g)
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One optimizer step using each parameter's gradient buffer:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
///
/// Fails without touching anything if any gradient is missing or non-finite.
pub fn sgd_step(params: &mut [Tensor], state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} momentum buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, (p, v)) in params.iter().zip(&state.velocity).enumerate() {
        let g = p
            .grad()
            .ok_or_else(|| Error::Shape(format!("parameter {i} has no gradient")))?;
        if v.len() != p.len() {
            return Err(Error::Shape(format!(
                "momentum buffer {i} has wrong length"
            )));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} at element {j}"
            )));
        }
    }
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay,
    } = *cfg;
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let Tensor { data, grad, .. } = p;
        let g = grad.as_ref().expect("checked above");
        for ((w, vel), gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = momentum * *vel + gv + weight_decay * *w;
            *w -= lr * *vel;
        }
    }
    Ok(())
}
