//! Layer kernels. Each forward has a matching backward that returns the
//! gradients of its inputs and parameters given the output gradient.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-major `C = A' B' + beta C` where `A'` is `A` or `A^T` (`m`x`k`) and
/// `B'` is `B` or `B^T` (`k`x`n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are asserted above and the strides describe
    // in-bounds row/column-major views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn conv_geometry(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let (&[c_in, h, w], &[c_out, wc, kh, kw]) = (input.shape(), weights.shape()) else {
        return Err(Error::arg(format!(
            "conv2d expects [C,H,W] input and [O,C,kh,kw] weights, got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    };
    if wc != c_in {
        return Err(Error::arg(format!("conv2d weights take {wc} channels, input has {c_in}")));
    }
    bias.expect_shape(&[c_out], "conv2d bias")?;
    if stride == 0 {
        return Err(Error::arg("conv2d stride must be positive"));
    }
    if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::arg(format!(
            "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
    })
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded cross-correlation: `[C_in,H,W] -> [C_out,H',W']`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, weights, bias, stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.c_out * oh * ow];
    for (o, row) in out.chunks_exact_mut(oh * ow).enumerate() {
        row.fill(bias.data()[o]);
    }
    gemm(g.c_out, g.patch_len(), oh * ow, weights.data(), false, &cols, false, &mut out, 1.0);
    Tensor::new(vec![g.c_out, oh, ow], out)
}

pub struct Conv2dGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<Conv2dGrads> {
    let g = conv_geometry(input, weights, bias, stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    grad_out.expect_shape(&[g.c_out, oh, ow], "conv2d output gradient")?;
    let cols = im2col(input.data(), &g);
    let mut gw = vec![0.0; g.c_out * g.patch_len()];
    gemm(g.c_out, oh * ow, g.patch_len(), grad_out.data(), false, &cols, true, &mut gw, 0.0);
    let gb = grad_out.data().chunks_exact(oh * ow).map(|r| r.iter().sum()).collect();
    let gi = if need_input_grad {
        let mut gcols = vec![0.0; g.patch_len() * oh * ow];
        gemm(g.patch_len(), g.c_out, oh * ow, weights.data(), true, grad_out.data(), false, &mut gcols, 0.0);
        Some(Tensor::new(vec![g.c_in, g.h, g.w], col2im(&gcols, &g))?)
    } else {
        None
    };
    Ok(Conv2dGrads {
        input: gi,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::vector(gb),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn apply_activation(input: &Tensor, kind: Activation) -> Tensor {
    let mut out = input.clone();
    match kind {
        Activation::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Gelu => out.data_mut().iter_mut().for_each(|v| *v = gelu(*v)),
    }
    out
}

/// Gradient through the activation, evaluated at the pre-activation `input`.
pub fn activation_backward(input: &Tensor, kind: Activation, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape(), "activation gradient")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| match kind {
            Activation::Relu => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Gelu => g * gelu_grad(x),
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn chw(input: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::arg(format!("{what} expects [C,H,W] with H,W >= 1, got {:?}", input.shape()))),
    }
}

/// Non-overlapping 2x2 mean pooling; odd trailing rows/columns are dropped.
pub fn avgpool2x2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "avgpool2x2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::arg(format!("avgpool2x2 needs at least 2x2 input, got {h}x{w}")));
    }
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (ch * h + 2 * oy) * w + 2 * ox;
                out[(ch * oh + oy) * ow + ox] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avgpool2x2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::arg("avgpool2x2_backward expects a [C,H,W] input shape"));
    };
    let (oh, ow) = (h / 2, w / 2);
    grad_out.expect_shape(&[c, oh, ow], "avgpool2x2 output gradient")?;
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * grad_out.data()[(ch * oh + oy) * ow + ox];
                let i = (ch * h + 2 * oy) * w + 2 * ox;
                gi[i] = g;
                gi[i + 1] = g;
                gi[i + w] = g;
                gi[i + w + 1] = g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gi)
}

/// Per-channel spatial mean: `[C,H,W] -> [C]`.
pub fn avgpool_global(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "avgpool_global")?;
    let hw = (h * w) as f64;
    let _ = c;
    Ok(Tensor::vector(
        input.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / hw).collect(),
    ))
}

pub fn avgpool_global_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::arg("avgpool_global_backward expects a [C,H,W] input shape"));
    };
    grad_out.expect_shape(&[c], "avgpool_global output gradient")?;
    let hw = (h * w) as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw, h * w))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

fn linear_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let &[d_out, d_in] = weights.shape() else {
        return Err(Error::arg(format!("linear weights must be [D_out,D_in], got {:?}", weights.shape())));
    };
    input.expect_shape(&[d_in], "linear input")?;
    bias.expect_shape(&[d_out], "linear bias")?;
    Ok((d_out, d_in))
}

/// `y = W x + b`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = linear_shapes(input, weights, bias)?;
    let mut y = bias.data().to_vec();
    gemm(d_out, d_in, 1, weights.data(), false, input.data(), false, &mut y, 1.0);
    Ok(Tensor::vector(y))
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weights: &Tensor, bias: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (d_out, d_in) = linear_shapes(input, weights, bias)?;
    grad_out.expect_shape(&[d_out], "linear output gradient")?;
    let mut gx = vec![0.0; d_in];
    gemm(d_in, d_out, 1, weights.data(), true, grad_out.data(), false, &mut gx, 0.0);
    let mut gw = vec![0.0; d_out * d_in];
    gemm(d_out, 1, d_in, grad_out.data(), false, input.data(), false, &mut gw, 0.0);
    Ok(LinearGrads {
        input: Tensor::vector(gx),
        weights: Tensor::new(vec![d_out, d_in], gw)?,
        bias: grad_out.clone(),
    })
}

/// Applies `y = W x + b` at every spatial location: `[C,H,W] -> [D,H,W]`.
pub fn linear_map(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "linear_map")?;
    let &[d, wc] = weights.shape() else {
        return Err(Error::arg(format!("linear weights must be [D_out,D_in], got {:?}", weights.shape())));
    };
    if wc != c {
        return Err(Error::arg(format!("linear_map weights take {wc} channels, input has {c}")));
    }
    bias.expect_shape(&[d], "linear_map bias")?;
    let hw = h * w;
    let mut out = vec![0.0; d * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias.data()[o]);
    }
    gemm(d, c, hw, weights.data(), false, input.data(), false, &mut out, 1.0);
    Tensor::new(vec![d, h, w], out)
}

pub fn linear_map_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (c, h, w) = chw(input, "linear_map")?;
    let d = weights.shape()[0];
    grad_out.expect_shape(&[d, h, w], "linear_map output gradient")?;
    let hw = h * w;
    let mut gx = vec![0.0; c * hw];
    gemm(c, d, hw, weights.data(), true, grad_out.data(), false, &mut gx, 0.0);
    let mut gw = vec![0.0; d * c];
    gemm(d, hw, c, grad_out.data(), false, input.data(), true, &mut gw, 0.0);
    let gb = grad_out.data().chunks_exact(hw).map(|r| r.iter().sum()).collect();
    Ok(LinearGrads {
        input: Tensor::new(vec![c, h, w], gx)?,
        weights: Tensor::new(vec![d, c], gw)?,
        bias: Tensor::vector(gb),
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, `max(z,0) - z y + ln(1 + exp(-|z|))`.
/// Returns `(loss, dloss/dz)`.
pub fn bce_with_logits(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}
