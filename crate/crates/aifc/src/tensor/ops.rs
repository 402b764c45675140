//! Forward kernels and their exact adjoints.
//!
//! Every kernel is a pure function: deterministic, sequential accumulation
//! order, fresh output storage. Binary ops broadcast only the right-hand
//! side, and only in two forms: a scalar `[1]` against anything, or a
//! per-channel `[C]` vector against a BCHW tensor.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    PerChannel,
    Scalar,
}

pub fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b == [1] {
        return Ok(Broadcast::Scalar);
    }
    if b.len() == 1 && a.len() == 4 && a[1] == b[0] {
        return Ok(Broadcast::PerChannel);
    }
    Err(TensorError::ShapeMismatch(format!(
        "cannot broadcast rhs {b:?} against lhs {a:?}"
    )))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let kind = broadcast_kind(a.shape(), b.shape())?;
    let ad = a.data();
    let bd = b.data();
    let out = match kind {
        Broadcast::Same => ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = bd[0];
            ad.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::PerChannel => {
            let (bs, c, h, w) = a.dims4()?;
            let hw = h * w;
            let mut out = Vec::with_capacity(a.numel());
            for bi in 0..bs {
                for ci in 0..c {
                    let y = bd[ci];
                    let base = (bi * c + ci) * hw;
                    out.extend(ad[base..base + hw].iter().map(|&x| f(x, y)));
                }
            }
            out
        }
    };
    Ok(Tensor::from_vec(a.shape(), out))
}

/// Collapse a gradient of `src_shape` down to `target` by summing the
/// broadcast dimensions. Inverse of the rhs broadcast in `zip_broadcast`.
pub fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    if target == [1] {
        return Tensor::scalar(g.data().iter().sum());
    }
    // per-channel: sum over batch and spatial dims
    let (b, c, h, w) = g.dims4().expect("per-channel reduce needs BCHW");
    debug_assert_eq!(target, [c]);
    let hw = h * w;
    let gd = g.data();
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            out[ci] += gd[base..base + hw].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(target, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x + c)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn ln(a: &Tensor) -> Tensor {
    a.map(f64::ln)
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(softplus_scalar)
}

pub fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn recip(a: &Tensor) -> Tensor {
    a.map(|x| 1.0 / x)
}

pub fn clamp_min(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x.max(c))
}

/// Standard normal CDF, double precision via erf.
pub fn std_normal_cdf(a: &Tensor) -> Tensor {
    a.map(std_normal_cdf_scalar)
}

pub fn std_normal_cdf_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub fn std_normal_pdf_scalar(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Round half away from zero (the quantizer's convention; identical to
/// `f64::round`).
pub fn ste_round(a: &Tensor) -> Tensor {
    a.map(f64::round)
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if h + 2 * padding < k {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d input extent {h} + 2*{padding} smaller than kernel {k}"
        )));
    }
    Ok((h + 2 * padding - k) / stride + 1)
}

fn conv_shapes(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias shape {:?} != [{cout}]",
                bt.shape()
            )));
        }
    }
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be >= 1".into()));
    }
    Ok((b, cin, h, wd, cout, kh, kw, stride))
}

/// 2D convolution (cross-correlation), weight layout `[Cout, Cin, kh, kw]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, wd, cout, kh, kw, s) = conv_shapes(x, w, bias, stride)?;
    let oh = conv2d_out_dim(h, kh, s, padding)?;
    let ow = conv2d_out_dim(wd, kw, s, padding)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let bias_v = bias.map_or(0.0, |bt| bt.data()[co]);
            for oy in 0..oh {
                let orow = (((bi * cout) + co) * oh + oy) * ow;
                let acc = &mut out[orow..orow + ow];
                if bias_v != 0.0 {
                    acc.iter_mut().for_each(|v| *v = bias_v);
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * s + ky).wrapping_sub(padding);
                        if iy >= h {
                            continue;
                        }
                        let xrow = &xd[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                        let wrow = &wdat[(((co * cin) + ci) * kh + ky) * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ox_range(kx, padding, s, wd, ow);
                            for ox in lo..hi {
                                acc[ox] += wv * xrow[ox * s + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[b, cout, oh, ow], out))
}

/// Valid output-column range such that `ox*s + kx - padding` lands in `[0, w)`.
#[inline]
fn ox_range(kx: usize, padding: usize, s: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(s)
    };
    // largest ox with ox*s + kx - padding <= w-1
    if kx > w - 1 + padding {
        return (0, 0);
    }
    let hi_incl = (w - 1 + padding - kx) / s;
    (lo.min(ow), (hi_incl + 1).min(ow))
}

/// Adjoint of conv2d with respect to its input.
pub fn conv2d_grad_input(
    gout: &Tensor,
    w: &Tensor,
    in_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (b, cout, oh, ow) = gout.dims4().unwrap();
    let (wcout, cin, kh, kw) = w.dims4().unwrap();
    debug_assert_eq!(cout, wcout);
    let (h, wd) = (in_shape[2], in_shape[3]);
    let gd = gout.data();
    let wdat = w.data();
    let mut gx = vec![0.0; b * cin * h * wd];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                let grow = &gd[(((bi * cout) + co) * oh + oy) * ow..][..ow];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky).wrapping_sub(padding);
                        if iy >= h {
                            continue;
                        }
                        let xrow = &mut gx[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                        let wrow = &wdat[(((co * cin) + ci) * kh + ky) * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ox_range(kx, padding, stride, wd, ow);
                            for ox in lo..hi {
                                xrow[ox * stride + kx - padding] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

/// Adjoint of conv2d with respect to its weight.
pub fn conv2d_grad_weight(
    gout: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (b, cout, oh, ow) = gout.dims4().unwrap();
    let (_, cin, h, wd) = x.dims4().unwrap();
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let gd = gout.data();
    let xd = x.data();
    let mut gw = vec![0.0; cout * cin * kh * kw];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                let grow = &gd[(((bi * cout) + co) * oh + oy) * ow..][..ow];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky).wrapping_sub(padding);
                        if iy >= h {
                            continue;
                        }
                        let xrow = &xd[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                        let wbase = (((co * cin) + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let (lo, hi) = ox_range(kx, padding, stride, wd, ow);
                            let mut acc = 0.0;
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[ox * stride + kx - padding];
                            }
                            gw[wbase + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(w_shape, gw)
}

/// Sum of `gout` over batch and spatial dims, per output channel.
pub fn grad_bias(gout: &Tensor) -> Tensor {
    let (b, c, h, w) = gout.dims4().unwrap();
    let hw = h * w;
    let gd = gout.data();
    let mut gb = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            gb[ci] += gd[base..base + hw].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], gb)
}

pub fn conv_transpose2d_out_dim(
    h: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let raw = (h - 1) * stride + k;
    if raw < 2 * padding + 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv_transpose2d output would be empty (in {h}, k {k}, stride {stride}, pad {padding})"
        )));
    }
    Ok(raw - 2 * padding)
}

/// Transposed 2D convolution, weight layout `[Cin, Cout, kh, kw]`.
///
/// This is the exact adjoint of `conv2d` with the same geometry: for any
/// x, y, w: `<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>` (with the
/// weight tensor reinterpreted across layouts).
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "conv_transpose2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv_transpose2d bias shape {:?} != [{cout}]",
                bt.shape()
            )));
        }
    }
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be >= 1".into()));
    }
    let oh = conv_transpose2d_out_dim(h, kh, stride, padding)?;
    let ow = conv_transpose2d_out_dim(wd, kw, stride, padding)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * cout * oh * ow];
    if let Some(bt) = bias {
        for bi in 0..b {
            for co in 0..cout {
                let base = ((bi * cout) + co) * oh * ow;
                let v = bt.data()[co];
                out[base..base + oh * ow].iter_mut().for_each(|o| *o = v);
            }
        }
    }
    for bi in 0..b {
        for ci in 0..cin {
            for co in 0..cout {
                for iy in 0..h {
                    let xrow = &xd[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                    for ky in 0..kh {
                        let oy = (iy * stride + ky).wrapping_sub(padding);
                        if oy >= oh {
                            continue;
                        }
                        let orow_base = (((bi * cout) + co) * oh + oy) * ow;
                        let wrow = &wdat[(((ci * cout) + co) * kh + ky) * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ox_range(kx, padding, stride, ow, wd);
                            let orow = &mut out[orow_base..orow_base + ow];
                            for ix in lo..hi {
                                orow[ix * stride + kx - padding] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[b, cout, oh, ow], out))
}

/// Adjoint of conv_transpose2d with respect to its input (a gather).
pub fn conv_transpose2d_grad_input(
    gout: &Tensor,
    w: &Tensor,
    in_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (b, cout, oh, ow) = gout.dims4().unwrap();
    let (cin, wcout, kh, kw) = w.dims4().unwrap();
    debug_assert_eq!(cout, wcout);
    let (h, wd) = (in_shape[2], in_shape[3]);
    let gd = gout.data();
    let wdat = w.data();
    let mut gx = vec![0.0; b * cin * h * wd];
    for bi in 0..b {
        for ci in 0..cin {
            for co in 0..cout {
                for iy in 0..h {
                    let xrow = &mut gx[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                    for ky in 0..kh {
                        let oy = (iy * stride + ky).wrapping_sub(padding);
                        if oy >= oh {
                            continue;
                        }
                        let grow = &gd[(((bi * cout) + co) * oh + oy) * ow..][..ow];
                        let wrow = &wdat[(((ci * cout) + co) * kh + ky) * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ox_range(kx, padding, stride, ow, wd);
                            for ix in lo..hi {
                                xrow[ix] += wv * grow[ix * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

/// Adjoint of conv_transpose2d with respect to its weight.
pub fn conv_transpose2d_grad_weight(
    gout: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (b, cout, oh, ow) = gout.dims4().unwrap();
    let (_, cin, h, wd) = x.dims4().unwrap();
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let gd = gout.data();
    let xd = x.data();
    let mut gw = vec![0.0; cin * cout * kh * kw];
    for bi in 0..b {
        for ci in 0..cin {
            for co in 0..cout {
                for iy in 0..h {
                    let xrow = &xd[(((bi * cin) + ci) * h + iy) * wd..][..wd];
                    for ky in 0..kh {
                        let oy = (iy * stride + ky).wrapping_sub(padding);
                        if oy >= oh {
                            continue;
                        }
                        let grow = &gd[(((bi * cout) + co) * oh + oy) * ow..][..ow];
                        let wbase = (((ci * cout) + co) * kh + ky) * kw;
                        for kx in 0..kw {
                            let (lo, hi) = ox_range(kx, padding, stride, ow, wd);
                            let mut acc = 0.0;
                            for ix in lo..hi {
                                acc += xrow[ix] * grow[ix * stride + kx - padding];
                            }
                            gw[wbase + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(w_shape, gw)
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        &[m, k] => (m, k),
        s => {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul lhs must be rank 2, got {s:?}"
            )))
        }
    };
    let (k2, n) = match b.shape() {
        &[k2, n] => (k2, n),
        s => {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul rhs must be rank 2, got {s:?}"
            )))
        }
    };
    if k != k2 {
        return Err(TensorError::ShapeMismatch(format!(
            "matmul inner dims differ: {k} vs {k2}"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_vec(&[m, n], out))
}

pub fn transpose2(a: &Tensor) -> Tensor {
    let &[m, n] = a.shape() else {
        panic!("transpose2 needs rank 2, got {:?}", a.shape())
    };
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = a.shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let len = a.shape()[axis];
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let ad = a.data();
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(ad[idx(l)]);
            }
            let mut z = 0.0;
            for l in 0..len {
                let e = (ad[idx(l)] - mx).exp();
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

/// VJP of softmax given its output `s` and incoming gradient `g`.
pub fn softmax_vjp(s: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let len = s.shape()[axis];
    let outer: usize = s.shape()[..axis].iter().product();
    let inner: usize = s.shape()[axis + 1..].iter().product();
    let sd = s.data();
    let gd = g.data();
    let mut out = vec![0.0; s.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += sd[idx(l)] * gd[idx(l)];
            }
            for l in 0..len {
                out[idx(l)] = sd[idx(l)] * (gd[idx(l)] - dot);
            }
        }
    }
    Tensor::from_vec(s.shape(), out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::Invalid("concat of zero tensors".into()));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(TensorError::ShapeMismatch("concat rank mismatch".into()));
        }
        for (d, (&a, &b)) in p.shape().iter().zip(out_shape.iter()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    p.shape(),
                    out_shape
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let blk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

pub fn slice_axis(a: &Tensor, axis: usize, from: usize, to: usize) -> Result<Tensor> {
    let rank = a.shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let len = a.shape()[axis];
    if from > to || to > len {
        return Err(TensorError::Invalid(format!(
            "slice [{from}, {to}) out of bounds for axis length {len}"
        )));
    }
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = to - from;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        let base = (o * len + from) * inner;
        out.extend_from_slice(&a.data()[base..base + (to - from) * inner]);
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

/// Scatter `g` (shaped like the slice) back into a zero tensor of
/// `parent_shape` at the slice location. Adjoint of `slice_axis`.
pub fn slice_axis_vjp(g: &Tensor, parent_shape: &[usize], axis: usize, from: usize) -> Tensor {
    let len = parent_shape[axis];
    let outer: usize = parent_shape[..axis].iter().product();
    let inner: usize = parent_shape[axis + 1..].iter().product();
    let slen = g.shape()[axis];
    let mut out = vec![0.0; parent_shape.iter().product()];
    for o in 0..outer {
        let src = &g.data()[o * slen * inner..(o + 1) * slen * inner];
        let dst_base = (o * len + from) * inner;
        out[dst_base..dst_base + slen * inner].copy_from_slice(src);
    }
    Tensor::from_vec(parent_shape, out)
}

pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "avg_pool2d: spatial dims {h}x{w} not divisible by {k}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        let oplane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &plane[(oy * k + dy) * w + ox * k..][..k];
                    acc += row.iter().sum::<f64>();
                }
                oplane[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, oh, ow], out))
}

pub fn avg_pool2d_vjp(g: &Tensor, in_shape: &[usize], k: usize) -> Tensor {
    let (b, c, oh, ow) = g.dims4().unwrap();
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = 1.0 / (k * k) as f64;
    let gd = g.data();
    let mut out = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let gplane = &gd[bc * oh * ow..(bc + 1) * oh * ow];
        let plane = &mut out[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gplane[oy * ow + ox] * inv;
                for dy in 0..k {
                    let row = &mut plane[(oy * k + dy) * w + ox * k..][..k];
                    row.iter_mut().for_each(|r| *r += v);
                }
            }
        }
    }
    Tensor::from_vec(in_shape, out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(TensorError::ShapeMismatch(format!(
            "reshape {:?} -> {shape:?} changes element count",
            a.shape()
        )));
    }
    Ok(Tensor::with_shape(shape.to_vec(), a.shared_data()))
}

pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
        return Err(TensorError::Invalid(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let in_shape = a.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    // strides of the input, reordered to output axis order
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let ad = a.data();
    let n = a.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(ad[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_sum_of_ones() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 4, 4]);
        let y = conv2d(&x, &w, None, 4, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 16.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::ones(&[1, 3, 4, 4]);
        let w = Tensor::ones(&[2, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 0),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_transpose_single_tap_expansion() {
        // one input value through a 4x4 ones kernel, stride 2, pad 1:
        // output positions (ky-1, kx-1) for ky,kx in 1..3 -> 2x2 of ones
        let x = Tensor::ones(&[1, 1, 1, 1]);
        let w = Tensor::ones(&[1, 1, 4, 4]);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_zero_input() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::ones(&[2, 4, 4, 4]);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x, w), y> == <x, convT(y, w)> whenever the conv geometry has
        // no stride remainder (the only way the codec uses it)
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 8, 6], -1.0, 1.0);
        let w = Tensor::rand_uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0);
        let fx = conv2d(&x, &w, None, 2, 1).unwrap();
        let y = Tensor::rand_uniform(&mut rng, fx.shape(), -1.0, 1.0);
        // reinterpret w [Cout=4, Cin=3, kh, kw] as convT weight [Cin_T=4, Cout_T=3, ...]
        let aty = conv_transpose2d(&y, &w, None, 2, 1).unwrap();
        assert_eq!(aty.shape(), x.shape());
        let lhs = dot(&fx, &y);
        let rhs = dot(&x, &aty);
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
        // the tape adjoint handles stride remainders on top of the plain
        // transpose: conv2d_grad_input scatters back into the exact input shape
        let x9 = Tensor::rand_uniform(&mut rng, &[1, 2, 9, 7], -1.0, 1.0);
        let w9 = Tensor::rand_uniform(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let fx9 = conv2d(&x9, &w9, None, 2, 1).unwrap();
        let y9 = Tensor::rand_uniform(&mut rng, fx9.shape(), -1.0, 1.0);
        let aty9 = conv2d_grad_input(&y9, &w9, x9.shape(), 2, 1);
        let lhs9 = dot(&fx9, &y9);
        let rhs9 = dot(&x9, &aty9);
        assert!((lhs9 - rhs9).abs() <= 1e-9 * lhs9.abs().max(1.0));
    }

    #[test]
    fn softmax_symmetry() {
        let a = Tensor::zeros(&[3]);
        let s = softmax(&a, 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_on_channel_axis() {
        let a = Tensor::ones(&[2, 2, 3, 3]);
        let b = Tensor::full(&[2, 3, 3, 3], 2.0);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3, 3]);
        // first batch: 2 channels of ones then 3 channels of twos
        assert_eq!(c.data()[0], 1.0);
        assert_eq!(c.data()[2 * 9], 2.0);
        let back = slice_axis(&c, 1, 0, 2).unwrap();
        assert!(back.bit_eq(&a));
    }

    #[test]
    fn permute_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
        let axes = [2, 0, 3, 1];
        let p = permute(&a, &axes).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        let back = permute(&p, &inverse_permutation(&axes)).unwrap();
        assert!(back.bit_eq(&a));
    }

    #[test]
    fn avg_pool_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn broadcast_per_channel() {
        let a = Tensor::ones(&[1, 2, 2, 2]);
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]);
        let y = add(&a, &b).unwrap();
        assert_eq!(y.data()[0], 11.0);
        assert_eq!(y.data()[4], 21.0);
        let g = reduce_to_shape(&Tensor::ones(&[1, 2, 2, 2]), &[2]);
        assert_eq!(g.data(), &[4.0, 4.0]);
    }

    #[test]
    fn softplus_stability() {
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
