//! Forward kernels: dense, convolution, batch-norm, activation and pooling.
//!
//! Convolution is cross-correlation (no kernel flip) with symmetric zero
//! padding. Geometries that do not divide exactly are rejected.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{BnParams, Tensor};

/// Output extent of a sliding window, or a geometry error if the window does
/// not fit or the stride does not divide the padded span exactly.
pub fn window_extent(input: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || window == 0 {
        return Err(Error::Geometry(format!(
            "window {window} and stride {stride} must be >= 1"
        )));
    }
    let padded = input + 2 * padding;
    if padded < window {
        return Err(Error::Geometry(format!(
            "window {window} larger than padded extent {padded}"
        )));
    }
    if !(padded - window).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "extent {input} with padding {padding}, window {window} and stride {stride} does not divide exactly"
        )));
    }
    Ok((padded - window) / stride + 1)
}

/// Output shape `[oc, h', w']` of a convolution.
pub fn conv2d_output_shape(
    kernel_shape: &[usize],
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<[usize; 3]> {
    if kernel_shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv kernel must be rank 4 [oc, ic, kh, kw], got {kernel_shape:?}"
        )));
    }
    if input_shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "conv input must be rank 3 [c, h, w], got {input_shape:?}"
        )));
    }
    if kernel_shape[1] != input_shape[0] {
        return Err(Error::Dimension(format!(
            "kernel {kernel_shape:?} expects {} input channels, input {input_shape:?} has {}",
            kernel_shape[1], input_shape[0]
        )));
    }
    let oh = window_extent(input_shape[1], kernel_shape[2], stride, padding)?;
    let ow = window_extent(input_shape[2], kernel_shape[3], stride, padding)?;
    Ok([kernel_shape[0], oh, ow])
}

/// Output positions `o` for which input row `o * stride + tap - padding` lies
/// inside `[0, extent)`.
pub(crate) fn valid_outputs(
    tap: usize,
    extent: usize,
    out_extent: usize,
    stride: usize,
    padding: usize,
) -> std::ops::Range<usize> {
    // need o*stride + tap >= padding and o*stride + tap < extent + padding
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    let hi_excl = if extent + padding > tap {
        ((extent + padding - tap - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    lo..hi_excl.max(lo)
}

/// `out[j] = sum_i w[j, i] * x[i] + b[j]`.
pub fn dense_forward(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 {
        return Err(Error::Dimension(format!(
            "dense weights must be rank 2 [out, in], got {ws:?}"
        )));
    }
    let (rows, cols) = (ws[0], ws[1]);
    if input.len() != cols {
        return Err(Error::Dimension(format!(
            "dense weights {ws:?} cannot take input of shape {:?}",
            input.shape()
        )));
    }
    if bias.len() != rows {
        return Err(Error::Dimension(format!(
            "dense bias {:?} does not match weights {ws:?}",
            bias.shape()
        )));
    }
    let w = weights.data();
    let x = input.data();
    let b = bias.data();
    let out = par::map_range(rows, |j| {
        let row = &w[j * cols..(j + 1) * cols];
        let acc: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
        acc + b[j]
    });
    Tensor::from_kernel(vec![rows], out)
}

pub fn conv2d_forward(
    kernel: &Tensor,
    bias: &Tensor,
    input: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [oc, oh, ow] = conv2d_output_shape(kernel.shape(), input.shape(), stride, padding)?;
    if bias.len() != oc {
        return Err(Error::Dimension(format!(
            "conv bias {:?} does not match kernel {:?}",
            bias.shape(),
            kernel.shape()
        )));
    }
    let ks = kernel.shape();
    let (ic, kh, kw) = (ks[1], ks[2], ks[3]);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let k = kernel.data();
    let x = input.data();
    let b = bias.data();

    let mut out = vec![0.0; oc * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |o, plane| {
        for c in 0..ic {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let oys = valid_outputs(ky, h, oh, stride, padding);
                for kx in 0..kw {
                    let tap = k[((o * ic + c) * kh + ky) * kw + kx];
                    let oxs = valid_outputs(kx, w, ow, stride, padding);
                    for oy in oys.clone() {
                        let iy = oy * stride + ky - padding;
                        let xrow = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in oxs.clone() {
                            orow[ox] += tap * xrow[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
        for v in plane.iter_mut() {
            *v += b[o];
        }
    });
    Tensor::from_kernel(vec![oc, oh, ow], out)
}

/// Channel index of flat element `i` for batch-norm broadcasting.
fn bn_index(params: &BnParams, shape: &[usize]) -> Result<impl Fn(usize) -> usize> {
    let numel: usize = shape.iter().product();
    let per_element = params.len() == numel;
    if !per_element && params.len() != shape[0] {
        return Err(Error::Dimension(format!(
            "batch-norm of length {} does not match input shape {shape:?}",
            params.len()
        )));
    }
    let plane = numel / shape[0];
    Ok(move |i: usize| if per_element { i } else { i / plane })
}

/// `gamma * (x - mu) / sigma + beta`, per channel (broadcast over space) or
/// per element when the parameter vectors match the element count.
pub fn batchnorm_forward(params: &BnParams, input: &Tensor) -> Result<Tensor> {
    let idx = bn_index(params, input.shape())?;
    let (g, be, mu, s) = (
        params.gamma(),
        params.beta(),
        params.mu_run(),
        params.sigma_run(),
    );
    let out = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = idx(i);
            g[c] * (x - mu[c]) / s[c] + be[c]
        })
        .collect();
    Tensor::from_kernel(input.shape().to_vec(), out)
}

pub fn relu(input: &Tensor) -> Result<Tensor> {
    input.map(|v| v.max(0.0))
}

pub fn flatten(input: &Tensor) -> Result<Tensor> {
    input.reshape(vec![input.len()])
}

/// Output shape of a pooling window over a `[c, h, w]` input.
pub fn pool_output_shape(
    input_shape: &[usize],
    window: [usize; 2],
    stride: usize,
) -> Result<[usize; 3]> {
    if input_shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "pooling input must be rank 3 [c, h, w], got {input_shape:?}"
        )));
    }
    let oh = window_extent(input_shape[1], window[0], stride, 0)?;
    let ow = window_extent(input_shape[2], window[1], stride, 0)?;
    Ok([input_shape[0], oh, ow])
}

/// Max pooling. Also returns, per output cell, the flat input index of the
/// winning element (first maximum in row-major window order).
pub fn maxpool(input: &Tensor, window: [usize; 2], stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let [c, oh, ow] = pool_output_shape(input.shape(), window, stride)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let x = input.data();
    let cells = par::map_range(c * oh * ow, |o| {
        let ch = o / (oh * ow);
        let (oy, ox) = ((o / ow) % oh, o % ow);
        let mut best = ch * h * w + (oy * stride) * w + ox * stride;
        for ky in 0..window[0] {
            for kx in 0..window[1] {
                let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                if x[i] > x[best] {
                    best = i;
                }
            }
        }
        (x[best], best)
    });
    let (vals, arg): (Vec<f64>, Vec<usize>) = cells.into_iter().unzip();
    Ok((Tensor::from_kernel(vec![c, oh, ow], vals)?, arg))
}

pub fn avgpool(input: &Tensor, window: [usize; 2], stride: usize) -> Result<Tensor> {
    let [c, oh, ow] = pool_output_shape(input.shape(), window, stride)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let x = input.data();
    let n = (window[0] * window[1]) as f64;
    let vals = par::map_range(c * oh * ow, |o| {
        let ch = o / (oh * ow);
        let (oy, ox) = ((o / ow) % oh, o % ow);
        let mut acc = 0.0;
        for ky in 0..window[0] {
            for kx in 0..window[1] {
                acc += x[ch * h * w + (oy * stride + ky) * w + ox * stride + kx];
            }
        }
        acc / n
    });
    Tensor::from_kernel(vec![c, oh, ow], vals)
}
