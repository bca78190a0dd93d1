//! Forward and backward kernels for the tape primitives.
//!
//! These are plain functions over [`Tensor`]s so the model can run a
//! tape-free forward pass (deletion/insertion curves need thousands of them)
//! through exactly the same arithmetic the tape records.

use super::Tensor;
use crate::error::{Error, Result};

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Dimension {
            op,
            axis: "rank",
            expected: rank,
            found: t.rank(),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            op,
            axis,
            expected,
            found,
        });
    }
    Ok(())
}

/// Geometry of a validated convolution.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize) -> Result<ConvDims> {
    expect_rank("conv2d", input, 3)?;
    expect_rank("conv2d", kernel, 4)?;
    expect_rank("conv2d", bias, 1)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernel.shape();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    expect_dim("conv2d", "in_channels", c_in, ks[1])?;
    expect_dim("conv2d", "out_channels", c_out, bias.len())?;
    if kh > h + 2 * pad {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "height",
            expected: h + 2 * pad,
            found: kh,
        });
    }
    if kw > w + 2 * pad {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "width",
            expected: w + 2 * pad,
            found: kw,
        });
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        pad,
        oh: h + 2 * pad - kh + 1,
        ow: w + 2 * pad - kw + 1,
    })
}

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, pad)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; d.c_out * d.oh * d.ow];
    for o in 0..d.c_out {
        for y in 0..d.oh {
            for xo in 0..d.ow {
                let mut acc = bias.data()[o];
                for c in 0..d.c_in {
                    for i in 0..d.kh {
                        let iy = (y + i) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ix = (xo + j) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += x[(c * d.h + iy as usize) * d.w + ix as usize]
                                * k[((o * d.c_in + c) * d.kh + i) * d.kw + j];
                        }
                    }
                }
                out[(o * d.oh + y) * d.ow + xo] = acc;
            }
        }
    }
    Tensor::new(vec![d.c_out, d.oh, d.ow], out)
}

/// Gradients of [`conv2d`] with respect to (input, kernel, bias).
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    pad: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(input, kernel, bias, pad)?;
    expect_dim(
        "conv2d_backward",
        "numel",
        d.c_out * d.oh * d.ow,
        upstream.len(),
    )?;
    let x = input.data();
    let k = kernel.data();
    let up = upstream.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; d.c_out];
    for o in 0..d.c_out {
        for y in 0..d.oh {
            for xo in 0..d.ow {
                let g = up[(o * d.oh + y) * d.ow + xo];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for c in 0..d.c_in {
                    for i in 0..d.kh {
                        let iy = (y + i) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ix = (xo + j) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let xi = (c * d.h + iy as usize) * d.w + ix as usize;
                            let ki = ((o * d.c_in + c) * d.kh + i) * d.kw + j;
                            gx[xi] += g * k[ki];
                            gk[ki] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![d.c_out], gb)?,
    ))
}

/// Max pooling over `k×k` windows with the given stride.
///
/// Returns the pooled tensor and, per output element, the flat input index of
/// the winning element. Ties go to the first position in row-major order;
/// windows that would overrun the input are dropped.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if k < 1 || stride < 1 {
        return Err(Error::Parameter(format!(
            "maxpool2d: window {k} and stride {stride} must be >= 1"
        )));
    }
    expect_rank("maxpool2d", input, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if k > h {
        return Err(Error::Dimension {
            op: "maxpool2d",
            axis: "height",
            expected: k,
            found: h,
        });
    }
    if k > w {
        return Err(Error::Dimension {
            op: "maxpool2d",
            axis: "width",
            expected: k,
            found: w,
        });
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = (ch * h + y * stride) * w + xo * stride;
                let mut best = x[best_idx];
                for i in 0..k {
                    for j in 0..k {
                        let idx = (ch * h + y * stride + i) * w + xo * stride + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        gd[idx] += u;
    }
    g
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Upstream gradient masked by `input > 0` (the derivative at 0 is 0).
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// `weight · input + bias`, treating `input` as a flat vector.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("dense", weight, 2)?;
    let (out, d) = (weight.shape()[0], weight.shape()[1]);
    expect_dim("dense", "in_features", d, input.len())?;
    expect_dim("dense", "out_features", out, bias.len())?;
    let w = weight.data();
    let x = input.data();
    let data = (0..out)
        .map(|o| {
            w[o * d..(o + 1) * d]
                .iter()
                .zip(x)
                .fold(bias.data()[o], |acc, (a, b)| acc + a * b)
        })
        .collect();
    Tensor::new(vec![out], data)
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (out, d) = (weight.shape()[0], weight.shape()[1]);
    expect_dim("dense_backward", "out_features", out, upstream.len())?;
    let w = weight.data();
    let x = input.data();
    let up = upstream.data();
    let mut gx = vec![0.0; d];
    let mut gw = vec![0.0; out * d];
    for o in 0..out {
        for i in 0..d {
            gx[i] += w[o * d + i] * up[o];
            gw[o * d + i] = up[o] * x[i];
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![out], up.to_vec())?,
    ))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` and the softmax used by its backward rule.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    let l = logits.data();
    if label >= l.len() {
        return Err(Error::Parameter(format!(
            "cross_entropy: label {label} out of range for {} classes",
            l.len()
        )));
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok((lse - l[label], softmax(l)))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
