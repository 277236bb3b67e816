//! 2-D convolution as im2col followed by tiled matrix products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm_nn, transpose, Init};
use super::Tensor;
use crate::{Error, Result};

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if s == 0 || k == 0 || h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!(
                "conv k={k} s={s} p={p} on {h}x{w} input"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Rows of the unfolded input: `in_channels * kernel^2`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output positions `o` in `0..out` with `o * stride + k - padding` inside `0..len`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if len + p > k {
            ((len + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(out), hi.max(lo.min(out)))
    }
}

/// Unfolds one `c x h x w` image into a `(c * k * k) x (oh * ow)` matrix,
/// rows ordered by `(channel, ky, kx)`, zeros where the window hits padding.
fn im2col(
    src: &[f64],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let np = oh * ow;
    cols.fill(0.0);
    for ci in 0..g.in_channels {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, w, ow);
                let row =
                    &mut cols[((ci * k + ky) * k + kx) * np..((ci * k + ky) * k + kx + 1) * np];
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let irow = &plane[iy * w..(iy + 1) * w];
                    let orow = &mut row[oy * ow + ox0..oy * ow + ox1];
                    let ix0 = ox0 * s + kx - p;
                    if s == 1 {
                        orow.copy_from_slice(&irow[ix0..ix0 + orow.len()]);
                    } else {
                        for (j, v) in orow.iter_mut().enumerate() {
                            *v = irow[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds unfolded gradients back into the image.
fn col2im_acc(
    cols: &[f64],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let np = oh * ow;
    for ci in 0..g.in_channels {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, w, ow);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * np..((ci * k + ky) * k + kx + 1) * np];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let irow = &mut plane[iy * w..(iy + 1) * w];
                    let grow = &row[oy * ow + ox0..oy * ow + ox1];
                    let ix0 = ox0 * s + kx - p;
                    if s == 1 {
                        for (d, v) in irow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in grow.iter().enumerate() {
                            irow[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry_of(weight: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("weight shape {ws:?}")));
    }
    Ok(ConvGeometry {
        in_channels: ws[1],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        padding,
    })
}

/// Cross-correlation of an NCHW input with `[out, in, k, k]` weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry_of(weight, stride, padding)?;
    let (n, c, h, w) = input.dims4()?;
    if bias.shape() != [g.out_channels] {
        return Err(Error::Shape(format!(
            "bias {:?} for {} outputs",
            bias.shape(),
            g.out_channels
        )));
    }
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, conv expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    conv2d_forward_raw(
        input.data(),
        n,
        h,
        w,
        weight.data(),
        bias.data(),
        &g,
        out.data_mut(),
    );
    Ok(out)
}

/// Forward kernel over raw buffers; `out` is overwritten.
///
/// Each output element starts at its bias and accumulates
/// `weight * input` over `(in_channel, ky, kx)` in ascending order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward_raw(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    out: &mut [f64],
) {
    let (oh, ow) = g.output_hw(h, w).expect("checked by caller");
    let (kp, np) = (g.patch_len(), oh * ow);
    let in_len = g.in_channels * h * w;
    let out_len = g.out_channels * np;
    let mut cols = vec![0.0; kp * np];
    for b in 0..n {
        im2col(
            &input[b * in_len..(b + 1) * in_len],
            h,
            w,
            g,
            oh,
            ow,
            &mut cols,
        );
        gemm_nn(
            g.out_channels,
            kp,
            np,
            weight,
            &cols,
            &mut out[b * out_len..(b + 1) * out_len],
            Init::Bias(bias),
        );
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = geometry_of(weight, stride, padding)?;
    let (n, c, h, w) = input.dims4()?;
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, conv expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    if grad_out.shape() != [n, g.out_channels, oh, ow] {
        return Err(Error::Shape(format!(
            "grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, g.out_channels, oh, ow]
        )));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.out_channels]);
    conv2d_backward_raw(
        input.data(),
        n,
        h,
        w,
        weight.data(),
        &g,
        grad_out.data(),
        Some(gi.data_mut()),
        gw.data_mut(),
        gb.data_mut(),
    );
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// Backward kernel over raw buffers. Gradients are accumulated (`+=`) into
/// `grad_in` (skipped when `None`), `grad_w` and `grad_b`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_raw(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    g: &ConvGeometry,
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let (oh, ow) = g.output_hw(h, w).expect("checked by caller");
    let (co_n, kp, np) = (g.out_channels, g.patch_len(), oh * ow);
    let in_len = g.in_channels * h * w;
    let out_len = co_n * np;
    let mut cols = vec![0.0; kp * np];
    let mut cols_t = vec![0.0; kp * np];
    // weight transposed to [patch, out]
    let w_t: Vec<f64> = if grad_in.is_some() {
        let mut t = vec![0.0; kp * co_n];
        for co in 0..co_n {
            for q in 0..kp {
                t[q * co_n + co] = weight[co * kp + q];
            }
        }
        t
    } else {
        Vec::new()
    };
    for b in 0..n {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += go[co * np..(co + 1) * np].iter().sum::<f64>();
        }
        im2col(
            &input[b * in_len..(b + 1) * in_len],
            h,
            w,
            g,
            oh,
            ow,
            &mut cols,
        );
        transpose(kp, np, &cols, &mut cols_t);
        gemm_nn(co_n, np, kp, go, &cols_t, grad_w, Init::Accumulate);
        if let Some(gi) = grad_in.as_deref_mut() {
            gemm_nn(kp, co_n, np, &w_t, go, &mut cols, Init::Zero);
            col2im_acc(
                &cols,
                h,
                w,
                g,
                oh,
                ow,
                &mut gi[b * in_len..(b + 1) * in_len],
            );
        }
    }
}
