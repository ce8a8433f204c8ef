//! Pure numeric kernels: forward and reverse passes for every primitive the
//! crate uses. The tape ops in [`crate::tape`] and the non-recording
//! inference path in [`crate::mspn`] both call these, so the two paths cannot
//! drift apart.
//!
//! Layout conventions: feature maps `[c, h, w]`, plain maps `[h, w]`,
//! convolution weights `[out_ch, in_ch, kh, kw]` (transposed convolution
//! weights `[in_ch, out_ch, kh, kw]`), window attention maps `[p*p, h, w]`
//! with the offset axis in row-major `(dy, dx)` order.

use crate::error::SdrError;
use crate::tensor::{Scalar, Tensor};
use crate::Result;

fn shape_err<T>(context: &'static str, expected: &[usize], found: &[usize]) -> Result<T> {
    Err(SdrError::ShapeMismatch {
        context,
        expected: expected.to_vec(),
        found: found.to_vec(),
    })
}

fn expect_rank<T: Scalar>(context: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return shape_err(context, &vec![0; rank], t.shape());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output spatial extent of a zero-padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return Err(SdrError::Config(format!(
            "convolution does not fit: input {input}, kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2d convolution, zero padding, no dilation.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    expect_rank("conv2d input", input, 3)?;
    expect_rank("conv2d weight", weight, 4)?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, wci, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wci != ci {
        return shape_err("conv2d weight in_ch", &[co, ci, kh, kw], weight.shape());
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return shape_err("conv2d bias", &[co], b.shape());
        }
    }
    let ho = conv_out_extent(h, kh, stride, pad)?;
    let wo = conv_out_extent(w, kw, stride, pad)?;

    let mut out = Tensor::zeros(&[co, ho, wo]);
    for oc in 0..co {
        let base = bias.map_or(T::ZERO, |b| b.data()[oc]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = base;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.at3(ic, iy as usize, ix as usize)
                                * weight.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                let idx = out.idx3(oc, oy, ox);
                out.data_mut()[idx] = acc;
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`conv2d`]. Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_bias` is `None` when the forward ran without a bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);

    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = if has_bias {
        Some(Tensor::zeros(&[co]))
    } else {
        None
    };

    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = grad_out.at3(oc, oy, ox);
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[oc] += go;
                }
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                            let iidx = gi.idx3(ic, iy as usize, ix as usize);
                            gi.data_mut()[iidx] += weight.data()[widx] * go;
                            gw.data_mut()[widx] += input.at3(ic, iy as usize, ix as usize) * go;
                        }
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb))
}

/// Transposed 2d convolution. Weight layout `[in_ch, out_ch, kh, kw]`.
/// With `stride 2, kernel 3, pad 1, output_padding 1` the spatial extent
/// exactly doubles.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor<T>> {
    expect_rank("conv_transpose2d input", input, 3)?;
    expect_rank("conv_transpose2d weight", weight, 4)?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (wci, co, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wci != ci {
        return shape_err(
            "conv_transpose2d weight in_ch",
            &[ci, co, kh, kw],
            weight.shape(),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return shape_err("conv_transpose2d bias", &[co], b.shape());
        }
    }
    if stride == 0 || output_pad >= stride {
        return Err(SdrError::Config(format!(
            "transposed convolution needs 0 <= output_pad < stride, got stride {stride}, output_pad {output_pad}"
        )));
    }
    let ho = (h - 1) * stride + kh + output_pad;
    let wo = (w - 1) * stride + kw + output_pad;
    if ho < 2 * pad || wo < 2 * pad {
        return Err(SdrError::Config(format!(
            "transposed convolution padding {pad} exceeds output extent"
        )));
    }
    let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);

    let mut out = Tensor::zeros(&[co, ho, wo]);
    if let Some(b) = bias {
        for oc in 0..co {
            let v = b.data()[oc];
            for oy in 0..ho {
                for ox in 0..wo {
                    let idx = out.idx3(oc, oy, ox);
                    out.data_mut()[idx] = v;
                }
            }
        }
    }
    for ic in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let v = input.at3(ic, iy, ix);
                for oc in 0..co {
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let idx = out.idx3(oc, oy as usize, ox as usize);
                            out.data_mut()[idx] +=
                                v * weight.data()[((ic * co + oc) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (_, co, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);

    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let gb = if has_bias {
        let mut acc = Tensor::zeros(&[co]);
        for oc in 0..co {
            let mut s = T::ZERO;
            for oy in 0..ho {
                for ox in 0..wo {
                    s += grad_out.at3(oc, oy, ox);
                }
            }
            acc.data_mut()[oc] = s;
        }
        Some(acc)
    } else {
        None
    };

    for ic in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let v = input.at3(ic, iy, ix);
                let mut acc = T::ZERO;
                for oc in 0..co {
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let widx = ((ic * co + oc) * kh + ky) * kw + kx;
                            let go = grad_out.at3(oc, oy as usize, ox as usize);
                            acc += weight.data()[widx] * go;
                            gw.data_mut()[widx] += v * go;
                        }
                    }
                }
                let idx = gi.idx3(ic, iy, ix);
                gi.data_mut()[idx] = acc;
            }
        }
    }
    Ok((gi, gw, gb))
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

/// Layer normalization across channels, independently at every spatial
/// location: `y_c = gamma_c * (x_c - mean) / sqrt(var + eps) + beta_c`.
pub fn layer_norm_chan<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    expect_rank("layer_norm_chan input", input, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err("layer_norm_chan gamma/beta", &[c], gamma.shape());
    }
    let eps = T::from_f64(eps);
    let inv_c = T::ONE / T::from_f64(c as f64);
    let mut out = Tensor::zeros(input.shape());
    for y in 0..h {
        for x in 0..w {
            let mut mean = T::ZERO;
            for ch in 0..c {
                mean += input.at3(ch, y, x);
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for ch in 0..c {
                let d = input.at3(ch, y, x) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();
            for ch in 0..c {
                let idx = out.idx3(ch, y, x);
                out.data_mut()[idx] =
                    gamma.data()[ch] * (input.at3(ch, y, x) - mean) * inv_std + beta.data()[ch];
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`layer_norm_chan`]. Returns `(grad_input, grad_gamma,
/// grad_beta)`.
pub fn layer_norm_chan_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let eps = T::from_f64(eps);
    let inv_c = T::ONE / T::from_f64(c as f64);

    let mut gi = Tensor::zeros(input.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);

    for y in 0..h {
        for x in 0..w {
            let mut mean = T::ZERO;
            for ch in 0..c {
                mean += input.at3(ch, y, x);
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for ch in 0..c {
                let d = input.at3(ch, y, x) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();

            // Accumulate the two per-location reductions the input gradient
            // needs: sum of dxhat and sum of dxhat * xhat.
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xhat = T::ZERO;
            for ch in 0..c {
                let xhat = (input.at3(ch, y, x) - mean) * inv_std;
                let go = grad_out.at3(ch, y, x);
                let dxhat = go * gamma.data()[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                gg.data_mut()[ch] += go * xhat;
                gb.data_mut()[ch] += go;
            }
            for ch in 0..c {
                let xhat = (input.at3(ch, y, x) - mean) * inv_std;
                let dxhat = grad_out.at3(ch, y, x) * gamma.data()[ch];
                let idx = gi.idx3(ch, y, x);
                gi.data_mut()[idx] =
                    inv_std * (dxhat - inv_c * sum_dxhat - inv_c * xhat * sum_dxhat_xhat);
            }
        }
    }
    Ok((gi, gg, gb))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::ZERO))
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::ZERO {
            *gv = T::ZERO;
        }
    }
    g
}

/// Numerically stable softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
pub fn softplus<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::ZERO) + (T::ONE + (-v.abs()).exp()).ln())
}

pub fn softplus_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        let sig = T::ONE / (T::ONE + (-x).exp());
        *gv *= sig;
    }
    g
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

/// Concatenates rank-3 tensors along the channel axis. Rank-2 inputs count as
/// one channel.
pub fn concat_chan<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(SdrError::Config("concat of zero tensors".into()));
    }
    let (h, w) = spatial_of("concat_chan", inputs[0])?;
    let mut channels = 0;
    for t in inputs {
        let (th, tw) = spatial_of("concat_chan", t)?;
        if (th, tw) != (h, w) {
            return shape_err("concat_chan spatial", &[h, w], &[th, tw]);
        }
        channels += chan_of(t);
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Splits the concatenated gradient back into per-input gradients.
pub fn concat_chan_backward<T: Scalar>(
    input_shapes: &[Vec<usize>],
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let mut grads = Vec::with_capacity(input_shapes.len());
    let mut offset = 0;
    for shape in input_shapes {
        let len: usize = shape.iter().product();
        let data = grad_out.data()[offset..offset + len].to_vec();
        offset += len;
        grads.push(Tensor::from_vec(shape, data).expect("split length"));
    }
    grads
}

fn spatial_of<T: Scalar>(context: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.rank() {
        2 => Ok((t.shape()[0], t.shape()[1])),
        3 => Ok((t.shape()[1], t.shape()[2])),
        _ => shape_err(context, &[0, 0, 0], t.shape()),
    }
}

fn chan_of<T: Scalar>(t: &Tensor<T>) -> usize {
    if t.rank() == 3 {
        t.shape()[0]
    } else {
        1
    }
}

/// Reflection padding of a rank-2 or rank-3 map. The border pixel itself is
/// not repeated, so each pad amount must be strictly less than the extent.
pub fn reflect_pad2d<T: Scalar>(
    input: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let (h, w) = spatial_of("reflect_pad2d", input)?;
    let c = chan_of(input);
    if top >= h || bottom >= h || left >= w || right >= w {
        return Err(SdrError::Config(format!(
            "reflection pad ({top},{bottom},{left},{right}) too large for {h}x{w} map"
        )));
    }
    let (ho, wo) = (h + top + bottom, w + left + right);
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i >= n as isize {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Tensor::zeros(&out_shape(input, ho, wo));
    for ch in 0..c {
        for oy in 0..ho {
            let iy = reflect(oy as isize - top as isize, h);
            for ox in 0..wo {
                let ix = reflect(ox as isize - left as isize, w);
                out.data_mut()[(ch * ho + oy) * wo + ox] = input.data()[(ch * h + iy) * w + ix];
            }
        }
    }
    Ok(out)
}

pub fn reflect_pad2d_backward<T: Scalar>(
    input_shape: &[usize],
    top: usize,
    left: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let rank3 = input_shape.len() == 3;
    let (c, h, w) = if rank3 {
        (input_shape[0], input_shape[1], input_shape[2])
    } else {
        (1, input_shape[0], input_shape[1])
    };
    let (ho, wo) = if rank3 {
        (grad_out.shape()[1], grad_out.shape()[2])
    } else {
        (grad_out.shape()[0], grad_out.shape()[1])
    };
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i >= n as isize {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut gi = Tensor::zeros(input_shape);
    for ch in 0..c {
        for oy in 0..ho {
            let iy = reflect(oy as isize - top as isize, h);
            for ox in 0..wo {
                let ix = reflect(ox as isize - left as isize, w);
                gi.data_mut()[(ch * h + iy) * w + ix] +=
                    grad_out.data()[(ch * ho + oy) * wo + ox];
            }
        }
    }
    gi
}

/// Crops a rank-2 or rank-3 map to `height x width` starting at `(top, left)`.
pub fn crop2d<T: Scalar>(
    input: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (h, w) = spatial_of("crop2d", input)?;
    let c = chan_of(input);
    if top + height > h || left + width > w {
        return Err(SdrError::Config(format!(
            "crop ({top},{left})+{height}x{width} exceeds {h}x{w} map"
        )));
    }
    let mut out = Tensor::zeros(&out_shape(input, height, width));
    for ch in 0..c {
        for oy in 0..height {
            for ox in 0..width {
                out.data_mut()[(ch * height + oy) * width + ox] =
                    input.data()[(ch * h + (top + oy)) * w + (left + ox)];
            }
        }
    }
    Ok(out)
}

pub fn crop2d_backward<T: Scalar>(
    input_shape: &[usize],
    top: usize,
    left: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let rank3 = input_shape.len() == 3;
    let (c, h, w) = if rank3 {
        (input_shape[0], input_shape[1], input_shape[2])
    } else {
        (1, input_shape[0], input_shape[1])
    };
    let (height, width) = if rank3 {
        (grad_out.shape()[1], grad_out.shape()[2])
    } else {
        (grad_out.shape()[0], grad_out.shape()[1])
    };
    let mut gi = Tensor::zeros(input_shape);
    for ch in 0..c {
        for oy in 0..height {
            for ox in 0..width {
                gi.data_mut()[(ch * h + (top + oy)) * w + (left + ox)] =
                    grad_out.data()[(ch * height + oy) * width + ox];
            }
        }
    }
    gi
}

fn out_shape<T: Scalar>(like: &Tensor<T>, h: usize, w: usize) -> Vec<usize> {
    if like.rank() == 3 {
        vec![like.shape()[0], h, w]
    } else {
        vec![h, w]
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn ew_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ew_zip("ew_add", a, b, |x, y| x + y)
}

pub fn ew_sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ew_zip("ew_sub", a, b, |x, y| x - y)
}

pub fn ew_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ew_zip("ew_mul", a, b, |x, y| x * y)
}

fn ew_zip<T: Scalar>(
    context: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(context, a.shape(), b.shape());
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// `mul * x + add`, elementwise with scalar coefficients.
pub fn affine<T: Scalar>(input: &Tensor<T>, mul: T, add: T) -> Tensor<T> {
    input.map(|v| mul * v + add)
}

/// Multiplies every channel of a rank-3 tensor by a shared rank-2 map.
pub fn mul_broadcast_chan<T: Scalar>(input: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("mul_broadcast_chan input", input, 3)?;
    expect_rank("mul_broadcast_chan map", map, 2)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if map.shape() != [h, w] {
        return shape_err("mul_broadcast_chan map", &[h, w], map.shape());
    }
    let mut out = Tensor::zeros(input.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let idx = out.idx3(ch, y, x);
                out.data_mut()[idx] = input.at3(ch, y, x) * map.at2(y, x);
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`mul_broadcast_chan`]: `(grad_input, grad_map)`.
pub fn mul_broadcast_chan_backward<T: Scalar>(
    input: &Tensor<T>,
    map: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut gi = Tensor::zeros(input.shape());
    let mut gm = Tensor::zeros(map.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let go = grad_out.at3(ch, y, x);
                let idx = gi.idx3(ch, y, x);
                gi.data_mut()[idx] = go * map.at2(y, x);
                let midx = gm.idx2(y, x);
                gm.data_mut()[midx] += go * input.at3(ch, y, x);
            }
        }
    }
    (gi, gm)
}

pub fn sum_all<T: Scalar>(input: &Tensor<T>) -> T {
    let mut s = T::ZERO;
    for &v in input.data() {
        s += v;
    }
    s
}

// ---------------------------------------------------------------------------
// Window attention
// ---------------------------------------------------------------------------

/// Offset index of window displacement `(dy, dx)` for window size `p`:
/// row-major over `dy` then `dx`, each shifted by the half width.
#[inline]
pub fn window_offset_index(dy: isize, dx: isize, p: usize) -> usize {
    let half = (p / 2) as isize;
    ((dy + half) as usize) * p + (dx + half) as usize
}

/// Attention of every pixel over its `p x p` window. For each location the
/// logit of window offset `t = (dy, dx)` is the channel dot product of the
/// query at the location with the key at the displaced location, plus a
/// learned per-offset bias shared across the image. Softmax runs over the
/// in-bounds offsets only; out-of-bounds offsets get weight exactly zero.
///
/// `query`, `key`: `[l, h, w]`. `bias`: `[p*p]`. Output: `[p*p, h, w]`.
pub fn window_attention<T: Scalar>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    bias: &Tensor<T>,
    p: usize,
) -> Result<Tensor<T>> {
    expect_rank("window_attention query", query, 3)?;
    if query.shape() != key.shape() {
        return shape_err("window_attention key", query.shape(), key.shape());
    }
    if p % 2 == 0 || p == 0 {
        return Err(SdrError::Config(format!(
            "window size must be odd and positive, got {p}"
        )));
    }
    if bias.shape() != [p * p] {
        return shape_err("window_attention bias", &[p * p], bias.shape());
    }
    let (l, h, w) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let half = (p / 2) as isize;
    let mut out = Tensor::zeros(&[p * p, h, w]);
    let mut logits = vec![T::ZERO; p * p];
    for y in 0..h {
        for x in 0..w {
            // Logits for in-bounds offsets, tracking the running maximum for
            // a stabilized softmax.
            let mut max = None::<T>;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    let mut dot = bias.data()[t];
                    for c in 0..l {
                        dot += query.at3(c, y, x) * key.at3(c, ky as usize, kx as usize);
                    }
                    logits[t] = dot;
                    max = Some(match max {
                        Some(m) => m.max(dot),
                        None => dot,
                    });
                }
            }
            let max = max.expect("window always contains the center offset");
            let mut denom = T::ZERO;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    let e = (logits[t] - max).exp();
                    logits[t] = e;
                    denom += e;
                }
            }
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    let idx = out.idx3(t, y, x);
                    out.data_mut()[idx] = logits[t] / denom;
                }
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`window_attention`]. Needs the forward output `attn` for
/// the softmax Jacobian. Returns `(grad_query, grad_key, grad_bias)`.
pub fn window_attention_backward<T: Scalar>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    attn: &Tensor<T>,
    p: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, h, w) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let half = (p / 2) as isize;
    let mut gq = Tensor::zeros(query.shape());
    let mut gk = Tensor::zeros(key.shape());
    let mut gb = Tensor::zeros(&[p * p]);
    for y in 0..h {
        for x in 0..w {
            // Softmax Jacobian: dl_t = a_t * (g_t - sum_u a_u * g_u).
            let mut dot = T::ZERO;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    dot += attn.at3(t, y, x) * grad_out.at3(t, y, x);
                }
            }
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    let dl = attn.at3(t, y, x) * (grad_out.at3(t, y, x) - dot);
                    gb.data_mut()[t] += dl;
                    for c in 0..l {
                        let qidx = gq.idx3(c, y, x);
                        gq.data_mut()[qidx] += dl * key.at3(c, ky as usize, kx as usize);
                        let kidx = gk.idx3(c, ky as usize, kx as usize);
                        gk.data_mut()[kidx] += dl * query.at3(c, y, x);
                    }
                }
            }
        }
    }
    (gq, gk, gb)
}

/// Weighted gather of a map over each pixel's window: the output at a
/// location is the attention-weighted sum of `map` values at the in-bounds
/// displaced locations. `attn`: `[p*p, h, w]`, `map`: `[h, w]`.
pub fn window_gather<T: Scalar>(
    attn: &Tensor<T>,
    map: &Tensor<T>,
    p: usize,
) -> Result<Tensor<T>> {
    expect_rank("window_gather attn", attn, 3)?;
    expect_rank("window_gather map", map, 2)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if attn.shape() != [p * p, h, w] {
        return shape_err("window_gather attn", &[p * p, h, w], attn.shape());
    }
    let half = (p / 2) as isize;
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::ZERO;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    acc += attn.at3(t, y, x) * map.at2(ky as usize, kx as usize);
                }
            }
            let idx = out.idx2(y, x);
            out.data_mut()[idx] = acc;
        }
    }
    Ok(out)
}

/// Reverse pass of [`window_gather`]: `(grad_attn, grad_map)`.
pub fn window_gather_backward<T: Scalar>(
    attn: &Tensor<T>,
    map: &Tensor<T>,
    p: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let half = (p / 2) as isize;
    let mut ga = Tensor::zeros(attn.shape());
    let mut gm = Tensor::zeros(map.shape());
    for y in 0..h {
        for x in 0..w {
            let go = grad_out.at2(y, x);
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = window_offset_index(dy, dx, p);
                    let aidx = ga.idx3(t, y, x);
                    ga.data_mut()[aidx] = go * map.at2(ky as usize, kx as usize);
                    let midx = gm.idx2(ky as usize, kx as usize);
                    gm.data_mut()[midx] += go * attn.at3(t, y, x);
                }
            }
        }
    }
    (ga, gm)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Combined absolute and squared depth error, averaged over valid pixels:
/// `(sum |e| + sum e^2) / n` with `e = pred - target`, `n` the number of
/// pixels where `valid > 0`.
pub fn loss_l1l2<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &Tensor<T>,
) -> Result<T> {
    check_loss_shapes("loss_l1l2", pred, target, valid)?;
    let mut n = 0usize;
    let mut acc = T::ZERO;
    for ((&p, &t), &v) in pred.data().iter().zip(target.data()).zip(valid.data()) {
        if v > T::ZERO {
            let e = p - t;
            acc += e.abs() + e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(SdrError::NoValidPixels);
    }
    Ok(acc / T::from_f64(n as f64))
}

/// Gradient of [`loss_l1l2`] with respect to `pred`, scaled by `grad_out`.
/// The absolute term uses `sign(e)` with subgradient 0 at `e = 0`.
pub fn loss_l1l2_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &Tensor<T>,
    grad_out: T,
) -> Result<Tensor<T>> {
    let n = valid.data().iter().filter(|&&v| v > T::ZERO).count();
    if n == 0 {
        return Err(SdrError::NoValidPixels);
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let two = T::from_f64(2.0);
    let mut g = Tensor::zeros(pred.shape());
    for (i, ((&p, &t), &v)) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(valid.data())
        .enumerate()
    {
        if v > T::ZERO {
            let e = p - t;
            let sign = if e > T::ZERO {
                T::ONE
            } else if e < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            };
            g.data_mut()[i] = grad_out * inv_n * (sign + two * e);
        }
    }
    Ok(g)
}

/// Depth floor applied inside the scale-invariant logarithmic loss before
/// taking logarithms.
pub const SILOG_DEPTH_FLOOR: f64 = 1e-6;

/// Scale-invariant logarithmic loss. With `e = ln(max(pred, floor)) -
/// ln(target)` over valid pixels, the loss is `alpha * sqrt(V)` where
/// `V = mean((e - mean_e)^2) + (1 - lambda) * mean_e^2`.
///
/// That variance form is algebraically identical to
/// `mean(e^2) - lambda * mean(e)^2` but does not cancel catastrophically
/// when the prediction is a rescaled copy of the target, which is exactly
/// the case the scale-invariance property exercises.
pub fn loss_silog<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &Tensor<T>,
    alpha: T,
    lambda: T,
) -> Result<T> {
    check_loss_shapes("loss_silog", pred, target, valid)?;
    let floor = T::from_f64(SILOG_DEPTH_FLOOR);
    let mut n = 0usize;
    let mut sum = T::ZERO;
    for ((&p, &t), &v) in pred.data().iter().zip(target.data()).zip(valid.data()) {
        if v > T::ZERO {
            sum += (p.max(floor)).ln() - t.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SdrError::NoValidPixels);
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mean = sum * inv_n;
    let mut var = T::ZERO;
    for ((&p, &t), &v) in pred.data().iter().zip(target.data()).zip(valid.data()) {
        if v > T::ZERO {
            let d = (p.max(floor)).ln() - t.ln() - mean;
            var += d * d;
        }
    }
    var = var * inv_n + (T::ONE - lambda) * mean * mean;
    // Rounding can push the variance a hair below zero; anything further
    // negative is a real numerical failure.
    if var < T::ZERO {
        if var.to_f64() > -1e-12 {
            var = T::ZERO;
        } else {
            return Err(SdrError::NonFinite {
                node: "loss_silog variance".into(),
            });
        }
    }
    Ok(alpha * var.sqrt())
}

/// Gradient of [`loss_silog`] with respect to `pred`, scaled by `grad_out`.
/// Pixels clamped by the depth floor get zero gradient, as does the exact
/// zero-loss point where the square root is not differentiable.
pub fn loss_silog_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &Tensor<T>,
    alpha: T,
    lambda: T,
    grad_out: T,
) -> Result<Tensor<T>> {
    let floor = T::from_f64(SILOG_DEPTH_FLOOR);
    let mut n = 0usize;
    let mut sum = T::ZERO;
    for ((&p, &t), &v) in pred.data().iter().zip(target.data()).zip(valid.data()) {
        if v > T::ZERO {
            sum += (p.max(floor)).ln() - t.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SdrError::NoValidPixels);
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mean = sum * inv_n;
    let mut var = T::ZERO;
    for ((&p, &t), &v) in pred.data().iter().zip(target.data()).zip(valid.data()) {
        if v > T::ZERO {
            let d = (p.max(floor)).ln() - t.ln() - mean;
            var += d * d;
        }
    }
    var = var * inv_n + (T::ONE - lambda) * mean * mean;

    let mut g = Tensor::zeros(pred.shape());
    if var <= T::ZERO {
        return Ok(g);
    }
    let two = T::from_f64(2.0);
    let scale = grad_out * alpha / (two * var.sqrt());
    for (i, ((&p, &t), &v)) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(valid.data())
        .enumerate()
    {
        if v > T::ZERO && p > floor {
            let e = (p.max(floor)).ln() - t.ln();
            // dV/de_i = 2/n (e_i - mean) + 2 (1 - lambda)/n * mean.
            let dv = two * inv_n * (e - mean) + two * (T::ONE - lambda) * inv_n * mean;
            g.data_mut()[i] = scale * dv / p;
        }
    }
    Ok(g)
}

fn check_loss_shapes<T: Scalar>(
    context: &'static str,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &Tensor<T>,
) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape() != valid.shape() {
        return shape_err(context, pred.shape(), target.shape());
    }
    Ok(())
}
