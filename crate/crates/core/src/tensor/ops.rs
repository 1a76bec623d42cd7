//! Forward and backward kernels on plain tensors.
//!
//! All functions here are pure. Forward kernels validate shapes and reject
//! non-finite outputs; backward kernels assume the forward call succeeded.

use super::{ConvSpec, Dims, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

fn finite<T: Scalar>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    t.ensure_finite(op)?;
    Ok(t)
}

fn same_dims(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

fn check_vector<T: Scalar>(op: &'static str, name: &str, v: &Tensor<T>, len: usize) -> Result<()> {
    if v.numel() != len {
        return shape_err(op, format!("{name} has {} entries, expected {len}", v.numel()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<ConvGeom> {
    spec.validate()?;
    let [n, c, h, w] = x.dims();
    if c != spec.in_channels {
        return shape_err(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        );
    }
    if weight.dims() != spec.weight_dims() {
        return shape_err(
            "conv2d",
            format!(
                "weight dims {:?}, spec expects {:?}",
                weight.dims(),
                spec.weight_dims()
            ),
        );
    }
    if let Some(b) = bias {
        check_vector("conv2d", "bias", b, spec.out_channels)?;
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(ConvGeom { n, h, w, oh, ow })
}

/// Unfolds one group of one sample into a `(C_in/G · K_h · K_w) × (H_out · W_out)`
/// column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, spec: &ConvSpec, col: &mut [T]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = spec.padding();
    let s = spec.stride;
    let p = g.oh * g.ow;
    for ci in 0..spec.in_per_group() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - ph as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pw as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an input slab.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, spec: &ConvSpec, dx: &mut [T]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = spec.padding();
    let s = spec.stride;
    let p = g.oh * g.ow;
    for ci in 0..spec.in_per_group() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * s + kx) as isize - pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] =
                                plane[iy as usize * g.w + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid kernel-tap range for output index `o` along one axis.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = (-start).max(0) as usize;
    let hi = ((len as isize - start).min(k as isize)).max(0) as usize;
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let c = spec.in_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = spec.padding();
    let s = spec.stride;
    let xs = x.data();
    let ws = weight.data();
    for n in 0..g.n {
        for ch in 0..c {
            let plane = &xs[(n * c + ch) * g.h * g.w..(n * c + ch + 1) * g.h * g.w];
            let k = &ws[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(n * c + ch) * g.oh * g.ow..(n * c + ch + 1) * g.oh * g.ow];
            for oy in 0..g.oh {
                let (ky0, ky1) = tap_range(oy, s, ph, kh, g.h);
                let iy0 = oy * s + ky0 - ph;
                for ox in 0..g.ow {
                    let (kx0, kx1) = tap_range(ox, s, pw, kw, g.w);
                    let ix0 = ox * s + kx0 - pw;
                    let mut acc = T::zero();
                    for (dy, ky) in (ky0..ky1).enumerate() {
                        let row = &plane[(iy0 + dy) * g.w + ix0..];
                        let krow = &k[ky * kw..];
                        for (dx, kx) in (kx0..kx1).enumerate() {
                            acc = acc + krow[kx] * row[dx];
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding `(K - 1) / 2`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = check_conv(x, spec, weight, bias)?;
    let cout = spec.out_channels;
    let p = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * cout * p];

    if spec.in_per_group() == 1 && spec.out_per_group() == 1 {
        depthwise_forward(x, spec, weight, &g, &mut out);
    } else {
        let cin = spec.in_channels;
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let kdim = cin_g * spec.kernel_h * spec.kernel_w;
        let pointwise = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1;
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kdim * p]
        };
        let xs = x.data();
        let ws = weight.data();
        for n in 0..g.n {
            for grp in 0..spec.groups {
                let xoff = (n * cin + grp * cin_g) * g.h * g.w;
                let slab = &xs[xoff..xoff + cin_g * g.h * g.w];
                let b: &[T] = if pointwise {
                    slab
                } else {
                    im2col(slab, &g, spec, &mut col);
                    &col
                };
                let wg = &ws[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let ooff = (n * cout + grp * cout_g) * p;
                T::gemm(
                    cout_g,
                    kdim,
                    p,
                    wg,
                    kdim as isize,
                    1,
                    b,
                    p as isize,
                    1,
                    &mut out[ooff..ooff + cout_g * p],
                    p as isize,
                    1,
                    false,
                );
            }
        }
    }

    if let Some(b) = bias {
        let bs = b.data();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bv = bs[i % cout];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    finite(Tensor::from_parts([g.n, cout, g.oh, g.ow], out), "conv2d")
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    with_bias: bool,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check_conv(x, spec, weight, None)?;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let kdim = cin_g * spec.kernel_h * spec.kernel_w;
    let p = g.oh * g.ow;
    if dy.dims() != [g.n, cout, g.oh, g.ow] {
        return shape_err("conv2d_backward", format!("dy dims {:?}", dy.dims()));
    }
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut col = vec![T::zero(); kdim * p];
    let mut dcol = vec![T::zero(); kdim * p];
    let (xs, ws, dys) = (x.data(), weight.data(), dy.data());
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let xoff = (n * cin + grp * cin_g) * g.h * g.w;
            let slab = &xs[xoff..xoff + cin_g * g.h * g.w];
            im2col(slab, &g, spec, &mut col);
            let doff = (n * cout + grp * cout_g) * p;
            let dyg = &dys[doff..doff + cout_g * p];
            let woff = grp * cout_g * kdim;
            // dW_g += dY_g · colᵀ
            T::gemm(
                cout_g,
                p,
                kdim,
                dyg,
                p as isize,
                1,
                &col,
                1,
                p as isize,
                &mut dw[woff..woff + cout_g * kdim],
                kdim as isize,
                1,
                true,
            );
            // dcol = W_gᵀ · dY_g
            T::gemm(
                kdim,
                cout_g,
                p,
                &ws[woff..woff + cout_g * kdim],
                1,
                kdim as isize,
                dyg,
                p as isize,
                1,
                &mut dcol,
                p as isize,
                1,
                false,
            );
            col2im(&dcol, &g, spec, &mut dx[xoff..xoff + cin_g * g.h * g.w]);
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for (i, chunk) in dys.chunks(p).enumerate() {
            db[i % cout] = db[i % cout] + chunk.iter().copied().sum::<T>();
        }
        Tensor::vector(db)
    });
    Ok(ConvGrads {
        dx: Tensor::from_parts(x.dims(), dx),
        dw: Tensor::from_parts(weight.dims(), dw),
        db,
    })
}

// ---------------------------------------------------------------------------
// Pooling

fn pool_out(op: &'static str, h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid(format!("{op}: window and stride must be >= 1")));
    }
    if window > h || window > w {
        return shape_err(op, format!("window {window} larger than input {h}x{w}"));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Mean over `window×window` cells, no padding.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = pool_out("avg_pool2d", h, w, window, stride)?;
    let inv = 1.0 / (window * window) as f64;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xs.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..window {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..];
                    acc += row[..window].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                out.push(T::from_f64(acc * inv));
            }
        }
    }
    finite(Tensor::from_parts([n, c, oh, ow], out), "avg_pool2d")
}

pub fn avg_pool2d_backward<T: Scalar>(
    x_dims: Dims,
    window: usize,
    stride: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = x_dims;
    let [_, _, oh, ow] = dy.dims();
    let inv = T::from_f64(1.0 / (window * window) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * inv;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        plane[i] = plane[i] + g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(x_dims, dx)
}

/// Mean over the full spatial extent, producing `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if h * w == 0 {
        return shape_err("global_avg_pool", "empty spatial extent");
    }
    let inv = 1.0 / (h * w) as f64;
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    finite(Tensor::from_parts([n, c, 1, 1], out), "global_avg_pool")
}

pub fn global_avg_pool_backward<T: Scalar>(x_dims: Dims, dy: &Tensor<T>) -> Tensor<T> {
    let hw = x_dims[2] * x_dims[3];
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(x_dims.iter().product());
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_parts(x_dims, dx)
}

// ---------------------------------------------------------------------------
// Batch normalisation

/// Per-channel mean and biased variance over `(N, H, W)`, accumulated in f64.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let xs = x.data();
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            ss += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

fn affine_per_channel<T: Scalar>(x: &Tensor<T>, scale: &[f64], shift: &[f64]) -> Tensor<T> {
    let [_, c, h, w] = x.dims();
    let mut out = Vec::with_capacity(x.numel());
    for (i, plane) in x.data().chunks(h * w).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        out.extend(plane.iter().map(|v| T::from_f64(v.as_f64() * a + b)));
    }
    Tensor::from_parts(x.dims(), out)
}

/// Inference-mode batch norm: `(x − mean) / sqrt(var + eps) · γ + β`.
pub fn batch_norm_inference<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = x.dims()[1];
    for (name, v) in [("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)] {
        check_vector("batch_norm", name, v, c)?;
    }
    if var.data().iter().any(|v| v.as_f64() < 0.0) {
        return Err(Error::Invalid("batch_norm: running_var must be >= 0".into()));
    }
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (var.data()[ch].as_f64() + eps).sqrt();
        scale[ch] = gamma.data()[ch].as_f64() * inv;
        shift[ch] = beta.data()[ch].as_f64() - mean.data()[ch].as_f64() * scale[ch];
    }
    finite(affine_per_channel(x, &scale, &shift), "batch_norm")
}

/// Training-mode batch norm; returns the output and the batch mean / biased
/// variance used to normalise.
pub fn batch_norm_training<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let c = x.dims()[1];
    check_vector("batch_norm", "gamma", gamma, c)?;
    check_vector("batch_norm", "beta", beta, c)?;
    let (mean, var) = channel_stats(x);
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        scale[ch] = gamma.data()[ch].as_f64() * inv;
        shift[ch] = beta.data()[ch].as_f64() - mean[ch] * scale[ch];
    }
    let out = finite(affine_per_channel(x, &scale, &shift), "batch_norm")?;
    Ok((out, mean, var))
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running_stat(running: &mut [f32], batch: &[f64], momentum: f64) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
    }
}

/// Batch norm in either mode. In training mode the running statistics are
/// updated in place with `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<Tensor> {
    if !training {
        return batch_norm_inference(x, gamma, beta, running_mean, running_var, eps);
    }
    check_vector("batch_norm", "running_mean", running_mean, x.dims()[1])?;
    check_vector("batch_norm", "running_var", running_var, x.dims()[1])?;
    let (out, mean, var) = batch_norm_training(x, gamma, beta, eps)?;
    update_running_stat(running_mean.data_mut(), &mean, momentum);
    update_running_stat(running_var.data_mut(), &var, momentum);
    Ok(out)
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Backward of batch norm. `stats` holds the mean/variance that were used in
/// the forward pass; `batch_stats` says whether they depended on `x`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    dy: &Tensor<T>,
) -> BnGrads<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let (xs, dys) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma.data()[ch].as_f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (xv, dv) in xs[r.clone()].iter().zip(&dys[r]) {
                let xhat = (xv.as_f64() - mean[ch]) * inv;
                sum_dy += dv.as_f64();
                sum_dy_xhat += dv.as_f64() * xhat;
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((o, xv), dv) in dx[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&dys[r]) {
                let d = if batch_stats {
                    let xhat = (xv.as_f64() - mean[ch]) * inv;
                    g * inv / count * (count * dv.as_f64() - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * inv * dv.as_f64()
                };
                *o = T::from_f64(d);
            }
        }
    }
    BnGrads {
        dx: Tensor::from_parts(x.dims(), dx),
        dgamma: Tensor::vector(dgamma),
        dbeta: Tensor::vector(dbeta),
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite(x.map(|v| v.max(T::zero())), "relu")
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_parts(x.dims(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("add", a.dims(), b.dims())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    finite(Tensor::from_parts(a.dims(), data), "add")
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("mul", a.dims(), b.dims())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    finite(Tensor::from_parts(a.dims(), data), "mul")
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let s = T::from_f64(s);
    finite(x.map(|v| v * s), "scale")
}

/// Sum of every element as a `(1, 1, 1, 1)` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite(Tensor::scalar(T::from_f64(x.sum_f64())), "sum")
}

/// Stacks tensors along C, preserving order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Invalid("concat_channels of zero tensors".into()))?;
    let [n, _, h, w] = first.dims();
    let mut total = 0;
    for t in xs {
        let [tn, tc, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return shape_err(
                "concat_channels",
                format!("{:?} disagrees with {:?} on N,H,W", t.dims(), first.dims()),
            );
        }
        total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in xs {
            let tc = t.dims()[1];
            data.extend_from_slice(&t.data()[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Ok(Tensor::from_parts([n, total, h, w], data))
}

// ---------------------------------------------------------------------------
// Matrix products and softmax
//
// Rank-4 tensors are treated as a (N, C) batch of H×W matrices.

struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

fn mat_view(dims: Dims, transpose: bool) -> MatView {
    let (r, c) = (dims[2], dims[3]);
    if transpose {
        MatView { rows: c, cols: r, rs: 1, cs: c as isize }
    } else {
        MatView { rows: r, cols: c, rs: c as isize, cs: 1 }
    }
}

/// Batched `op(a) · op(b)` where `op` optionally transposes the trailing two
/// axes. Batch axes `(N, C)` must agree exactly.
pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Tensor<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad[..2] != bd[..2] {
        return shape_err("matmul", format!("batch axes {ad:?} vs {bd:?}"));
    }
    let va = mat_view(ad, transpose_a);
    let vb = mat_view(bd, transpose_b);
    if va.cols != vb.rows {
        return shape_err(
            "matmul",
            format!("inner dims {} vs {} ({ad:?} · {bd:?})", va.cols, vb.rows),
        );
    }
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    let batches = ad[0] * ad[1];
    let mut out = vec![T::zero(); batches * m * n];
    for i in 0..batches {
        T::gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            va.rs,
            va.cs,
            &b.data()[i * k * n..(i + 1) * k * n],
            vb.rs,
            vb.cs,
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
            false,
        );
    }
    finite(Tensor::from_parts([ad[0], ad[1], m, n], out), "matmul")
}

/// Gradients `(da, db)` of [`matmul`], laid out like `a` and `b`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_a: bool,
    transpose_b: bool,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ad, bd) = (a.dims(), b.dims());
    let va = mat_view(ad, transpose_a);
    let vb = mat_view(bd, transpose_b);
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    let batches = ad[0] * ad[1];
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for i in 0..batches {
        let dci = &dc.data()[i * m * n..(i + 1) * m * n];
        // dA (m×k) = dC · op(b)ᵀ, written through op(a)'s strides.
        T::gemm(
            m,
            n,
            k,
            dci,
            n as isize,
            1,
            &b.data()[i * k * n..(i + 1) * k * n],
            vb.cs,
            vb.rs,
            &mut da[i * m * k..(i + 1) * m * k],
            va.rs,
            va.cs,
            false,
        );
        // dB (k×n) = op(a)ᵀ · dC, written through op(b)'s strides.
        T::gemm(
            k,
            m,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            va.cs,
            va.rs,
            dci,
            n as isize,
            1,
            &mut db[i * k * n..(i + 1) * k * n],
            vb.rs,
            vb.cs,
            false,
        );
    }
    (Tensor::from_parts(ad, da), Tensor::from_parts(bd, db))
}

/// Softmax along W. Maximum-subtracted, denominator accumulated in f64.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = x.dims()[3];
    if w == 0 {
        return shape_err("softmax_lastdim", "empty rows");
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(w) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / denom)));
    }
    finite(Tensor::from_parts(x.dims(), out), "softmax_lastdim")
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let w = y.dims()[3];
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, dr) in y.data().chunks(w).zip(dy.data().chunks(w)) {
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        dx.extend(
            yr.iter()
                .zip(dr)
                .map(|(a, b)| T::from_f64(a.as_f64() * (b.as_f64() - dot))),
        );
    }
    Tensor::from_parts(y.dims(), dx)
}

/// Mean softmax cross-entropy of `(N, K, 1, 1)` logits against class labels.
/// Returns the loss and the class probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k, h, w] = logits.dims();
    if h * w != 1 {
        return shape_err("cross_entropy", format!("logits must be (N, K, 1, 1), got {:?}", logits.dims()));
    }
    if labels.len() != n {
        return shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_lastdim(&logits.reshape([1, 1, n, k])?)?.reshape([n, k, 1, 1])?;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs.data()[i * k + l].as_f64().max(1e-300)).ln())
        .sum::<f64>()
        / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct nested-loop cross-correlation, kept independent of the kernels.
    fn conv_oracle(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
        let [n, _, h, wd] = x.dims();
        let (ph, pw) = spec.padding();
        let oh = (h + 2 * ph - spec.kernel_h) / spec.stride + 1;
        let ow = (wd + 2 * pw - spec.kernel_w) / spec.stride + 1;
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        Tensor::from_fn([n, spec.out_channels, oh, ow], |[b_, co, oy, ox]| {
            let grp = co / cout_g;
            let mut acc = b.map_or(0.0, |bb| bb.data()[co]);
            for ci in 0..cin_g {
                for ky in 0..spec.kernel_h {
                    for kx in 0..spec.kernel_w {
                        let iy = (oy * spec.stride + ky) as isize - ph as isize;
                        let ix = (ox * spec.stride + kx) as isize - pw as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        acc += w.at([co, ci, ky, kx]) * x.at([b_, grp * cin_g + ci, iy as usize, ix as usize]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::<f32>::randn([1, 2, 4, 4], 1.0, &mut rng(1));
        let spec = ConvSpec::new(2, 2, 1);
        let w = Tensor::from_fn([2, 2, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &spec, &w, None).unwrap(), x);
    }

    #[test]
    fn conv_zero_weight_same_size() {
        let x = Tensor::<f32>::randn([1, 1, 3, 3], 1.0, &mut rng(2));
        let spec = ConvSpec::new(1, 1, 3);
        let y = conv2d(&x, &spec, &Tensor::zeros([1, 1, 3, 3]), None).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_grouped_matches_oracle() {
        let mut r = rng(3);
        let x = Tensor::<f32>::randn([1, 4, 8, 8], 1.0, &mut r);
        let spec = ConvSpec::new(4, 4, 3).with_groups(2);
        let w = Tensor::<f32>::randn(spec.weight_dims(), 0.5, &mut r);
        let got = conv2d(&x, &spec, &w, None).unwrap();
        let want = conv_oracle(&x.cast(), &spec, &w.cast(), None);
        assert!(got.cast::<f64>().max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let spec = ConvSpec::new(4, 4, 3);
        assert!(conv2d(&x, &spec, &Tensor::zeros(spec.weight_dims()), None).is_err());
        let spec = ConvSpec::new(3, 4, 3);
        assert!(conv2d(&x, &spec, &Tensor::zeros([4, 3, 1, 1]), None).is_err());
        let bias = Tensor::vector(vec![0.0f32; 3]);
        assert!(conv2d(&x, &spec, &Tensor::zeros(spec.weight_dims()), Some(&bias)).is_err());
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([1, 2, 6, 6], 0.75);
        assert!(avg_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 0.75));
        assert!(avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn avg_pool_matches_loop() {
        let x = Tensor::<f32>::randn([1, 3, 8, 8], 1.0, &mut rng(4));
        let y = avg_pool2d(&x, 2, 2).unwrap();
        let want = Tensor::<f64>::from_fn([1, 3, 4, 4], |[n, c, i, j]| {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += x.at([n, c, 2 * i + dy, 2 * j + dx]) as f64;
                }
            }
            s / 4.0
        });
        assert!(y.cast::<f64>().max_abs_diff(&want) < 1e-7);
    }

    #[test]
    fn batch_norm_cases() {
        let mut r = rng(5);
        let x = Tensor::<f32>::randn([2, 3, 4, 4], 1.0, &mut r);
        let ones = Tensor::vector(vec![1.0f32; 3]);
        let zeros = Tensor::vector(vec![0.0f32; 3]);
        let y = batch_norm_inference(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(y, x);

        let twos = Tensor::vector(vec![2.0f32; 3]);
        let y = batch_norm_inference(&Tensor::zeros([1, 3, 2, 2]), &twos, &ones, &zeros, &ones, 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));

        let g = Tensor::<f32>::randn([3, 1, 1, 1], 1.0, &mut r);
        let b = Tensor::<f32>::randn([3, 1, 1, 1], 1.0, &mut r);
        let m = Tensor::<f32>::randn([3, 1, 1, 1], 1.0, &mut r);
        let v = Tensor::<f32>::uniform([3, 1, 1, 1], 1.0, &mut r).map(|t| t.abs() + 0.1);
        let y = batch_norm_inference(&x, &g, &b, &m, &v, 1e-5).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let xv = x.at([n, c, i, j]) as f64;
                        let want = (xv - m.data()[c] as f64) / (v.data()[c] as f64 + 1e-5).sqrt()
                            * g.data()[c] as f64
                            + b.data()[c] as f64;
                        assert!((y.at([n, c, i, j]) as f64 - want).abs() < 1e-6);
                    }
                }
            }
        }
        assert!(batch_norm_inference(&x, &Tensor::vector(vec![1.0f32; 2]), &zeros, &zeros, &ones, 0.0).is_err());
        let neg = Tensor::vector(vec![-1.0f32; 3]);
        assert!(batch_norm_inference(&x, &ones, &zeros, &zeros, &neg, 0.0).is_err());
    }

    #[test]
    fn batch_norm_training_updates_running_stats() {
        let x = Tensor::<f32>::randn([4, 2, 3, 3], 2.0, &mut rng(6)).map(|v| v + 1.0);
        let ones = Tensor::vector(vec![1.0f32; 2]);
        let zeros = Tensor::vector(vec![0.0f32; 2]);
        let (mut rm, mut rv) = (zeros.clone(), ones.clone());
        let y = batch_norm(&x, &ones, &zeros, &mut rm, &mut rv, 1e-5, 0.1, true).unwrap();
        let (mean, var) = channel_stats(&x);
        let (ym, yv) = channel_stats(&y);
        for c in 0..2 {
            assert!(ym[c].abs() < 1e-6);
            assert!((yv[c] - 1.0).abs() < 1e-3);
            assert!((rm.data()[c] as f64 - 0.1 * mean[c]).abs() < 1e-6);
            assert!((rv.data()[c] as f64 - (0.9 + 0.1 * var[c])).abs() < 1e-6);
        }
    }

    #[test]
    fn elementwise_cases() {
        let x = Tensor::new([1, 1, 1, 2], vec![-1.0f32, 2.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 2.0]);
        let s = softmax_lastdim(&Tensor::<f32>::full([1, 1, 1, 4], 3.0)).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(add(&x, &Tensor::zeros([1, 1, 2, 1])).is_err());
    }

    #[test]
    fn matmul_matches_loop() {
        let mut r = rng(7);
        let a = Tensor::<f32>::randn([1, 1, 2, 2], 1.0, &mut r);
        let b = Tensor::<f32>::randn([1, 1, 2, 2], 1.0, &mut r);
        let c = matmul(&a, &b, false, false).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|k| a.at([0, 0, i, k]) as f64 * b.at([0, 0, k, j]) as f64).sum();
                assert!((c.at([0, 0, i, j]) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_transpose_flags() {
        let mut r = rng(8);
        let a = Tensor::<f64>::randn([2, 3, 4, 5], 1.0, &mut r);
        let b = Tensor::<f64>::randn([2, 3, 4, 6], 1.0, &mut r);
        let c = matmul(&a, &b, true, false).unwrap();
        assert_eq!(c.dims(), [2, 3, 5, 6]);
        let want = Tensor::<f64>::from_fn([2, 3, 5, 6], |[n, ch, i, j]| {
            (0..4).map(|k| a.at([n, ch, k, i]) * b.at([n, ch, k, j])).sum()
        });
        assert!(c.max_abs_diff(&want) < 1e-12);
        let d = matmul(&b, &b, false, true).unwrap();
        assert_eq!(d.dims(), [2, 3, 4, 4]);
        assert!(matmul(&a, &b, false, false).is_err());
    }

    #[test]
    fn concat_then_slice_recovers() {
        let mut r = rng(9);
        let a = Tensor::<f32>::randn([2, 3, 2, 2], 1.0, &mut r);
        let b = Tensor::<f32>::randn([2, 1, 2, 2], 1.0, &mut r);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.slice_channels(0, 3).unwrap(), a);
        assert_eq!(c.slice_channels(3, 1).unwrap(), b);
        assert!(concat_channels(&[&a, &Tensor::zeros([2, 1, 3, 2])]).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Tensor::<f32>::zeros([2, 4, 1, 1]);
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
        assert!(cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::from_parts([1, 1, 1, 2], vec![f32::MAX, f32::MAX]);
        assert!(matches!(add(&x, &x), Err(Error::NonFinite { .. })));
        assert!(Tensor::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
    }
}
