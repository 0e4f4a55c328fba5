use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// Output length of a zero-padded convolution with padding `(k - 1) / 2`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// Range of output positions `o` for which `o * stride + offset - pad` lands
/// inside `0..input`.
#[inline]
fn valid_range(out: usize, input: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if input + pad > offset {
        ((input + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_shapes(input: &Tensor, weights: &Tensor, bias: &[f64], stride: usize) -> Result<[usize; 7]> {
    let (&[c, h, w], &[f, wc, kh, kw]) = (input.dims(), weights.dims()) else {
        return Err(Error::Shape(format!(
            "conv2d expects input [C,H,W] and weights [F,C,k,k], got {:?} and {:?}",
            input.dims(),
            weights.dims()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!("conv2d: input has {c} channels, weights expect {wc}")));
    }
    if kh != kw {
        return Err(Error::Shape(format!("conv2d: non-square kernel {kh}x{kw}")));
    }
    if kh > h || kh > w {
        return Err(Error::Shape(format!("conv2d: kernel {kh} larger than input {h}x{w}")));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be >= 1".into()));
    }
    if bias.len() != f {
        return Err(Error::Shape(format!("conv2d: {f} filters but {} biases", bias.len())));
    }
    Ok([c, h, w, f, kh, conv_output_size(h, kh, stride), conv_output_size(w, kh, stride)])
}

/// 2-D cross-correlation with zero padding `(k - 1) / 2`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f64], stride: usize) -> Result<Tensor> {
    let [c, h, w, f, k, ho, wo] = conv_shapes(input, weights, bias, stride)?;
    let pad = (k - 1) / 2;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; f * ho * wo];
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(wo, w, kx, pad, stride)).collect();
    for fi in 0..f {
        let plane = &mut out[fi * ho * wo..(fi + 1) * ho * wo];
        plane.fill(bias[fi]);
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, pad, stride);
                for kx in 0..k {
                    let wv = wt[((fi * c + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = ranges[kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let row_in = &xin[iy * w..(iy + 1) * w];
                        let row_out = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let base = kx as isize - pad as isize;
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, ho, wo], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv2d`] for upstream gradient `grad_out`.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, stride: usize, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let f = weights.dims()[0];
    let [c, h, w, f, k, ho, wo] = conv_shapes(input, weights, &vec![0.0; f], stride)?;
    if grad_out.dims() != [f, ho, wo] {
        return Err(Error::Shape(format!(
            "conv2d_backward: upstream {:?}, expected {:?}",
            grad_out.dims(),
            [f, ho, wo]
        )));
    }
    let pad = (k - 1) / 2;
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; f];
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(wo, w, kx, pad, stride)).collect();
    for fi in 0..f {
        let gplane = &g[fi * ho * wo..(fi + 1) * ho * wo];
        db[fi] = gplane.iter().sum();
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, pad, stride);
                for kx in 0..k {
                    let widx = ((fi * c + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = ranges[kx];
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let row_in = &xin[iy * w..(iy + 1) * w];
                        let drow = &mut dxin[iy * w..(iy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            acc += grow[ox] * row_in[ix];
                            drow[ix] += wv * grow[ox];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(vec![c, h, w], dx)?,
        weights: Tensor::new(weights.dims().to_vec(), dw)?,
        bias: db,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of [`relu`]. The subgradient at exactly zero is taken as 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub output: Tensor,
    /// Flat input offset of the winning element for every output element.
    pub argmax: Vec<usize>,
}

/// Max pooling without padding. Ties go to the first element in a row-major
/// scan of the window.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<PoolOutput> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::Shape(format!("maxpool2d expects [C,H,W], got {:?}", input.dims())));
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Shape(format!("maxpool2d: window {window} stride {stride} on {h}x{w}")));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![c, ho, wo], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_dims);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    g
}

fn linear_shapes(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<(usize, usize)> {
    let &[d_out, d_in] = weights.dims() else {
        return Err(Error::Shape(format!("linear expects weights [D_out,D_in], got {:?}", weights.dims())));
    };
    if input.len() != d_in || bias.len() != d_out {
        return Err(Error::Shape(format!(
            "linear: weights {:?}, input {}, bias {}",
            weights.dims(),
            input.len(),
            bias.len()
        )));
    }
    Ok((d_out, d_in))
}

/// `weights · input + bias`.
pub fn linear(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (_, d_in) = linear_shapes(input, weights, bias)?;
    Ok(weights
        .data()
        .chunks_exact(d_in)
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Vec<f64>,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

pub fn linear_backward(input: &[f64], weights: &Tensor, grad_out: &[f64]) -> Result<LinearGrads> {
    let (d_out, d_in) = linear_shapes(input, weights, grad_out)?;
    let mut dx = vec![0.0; d_in];
    let mut dw = vec![0.0; d_out * d_in];
    for ((row, drow), &g) in weights.data().chunks_exact(d_in).zip(dw.chunks_exact_mut(d_in)).zip(grad_out) {
        if g == 0.0 {
            continue;
        }
        for ((dxv, &w), (dwv, &x)) in dx.iter_mut().zip(row).zip(drow.iter_mut().zip(input)) {
            *dxv += w * g;
            *dwv = g * x;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weights: Tensor::new(weights.dims().to_vec(), dw)?,
        bias: grad_out.to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub unit: Vec<f64>,
    pub norm: f64,
}

/// Projects `v` onto the unit sphere. Fails when `‖v‖ <= eps`, which in this
/// code base means an embedding has collapsed.
pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Normalized> {
    let norm = super::norm(v);
    if !(norm > eps) {
        return Err(Error::DegenerateVector { norm, eps });
    }
    Ok(Normalized {
        unit: v.iter().map(|x| x / norm).collect(),
        norm,
    })
}

/// `(I - y yᵀ) g / ‖v‖`.
pub fn l2_normalize_backward(normalized: &Normalized, grad_out: &[f64]) -> Vec<f64> {
    let y = &normalized.unit;
    let yg = super::dot(y, grad_out);
    y.iter()
        .zip(grad_out)
        .map(|(yi, gi)| (gi - yi * yg) / normalized.norm)
        .collect()
}
