//! Torus-topology tensor operations.
//!
//! Every spatial operator here indexes modulo the image size, so a periodic
//! input stays periodic through any composition of them. The kernels operate
//! on plain NCHW tensors and are shared by the eager functions below and by
//! the autodiff tape.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Boundary handling of a spatial operator.
///
/// Only `Circular` is used by the models; `Zero` exists for negative-control
/// builds that must visibly break tileability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Integer translation, interpreted modulo the tensor size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Shift2D {
    pub dy: i64,
    pub dx: i64,
}

impl Shift2D {
    pub const ZERO: Shift2D = Shift2D { dy: 0, dx: 0 };

    pub fn new(dy: i64, dx: i64) -> Self {
        Self { dy, dx }
    }

    /// The same physical shift expressed at a different resolution.
    ///
    /// `scale` is `target_res / source_res`; fractional results round half
    /// away from zero.
    pub fn rescaled(self, scale: f64) -> Self {
        Self {
            dy: (self.dy as f64 * scale).round() as i64,
            dx: (self.dx as f64 * scale).round() as i64,
        }
    }

    pub fn compose(self, other: Shift2D) -> Self {
        Self { dy: self.dy + other.dy, dx: self.dx + other.dx }
    }

    pub fn is_zero_mod(self, h: usize, w: usize) -> bool {
        self.dy.rem_euclid(h as i64) == 0 && self.dx.rem_euclid(w as i64) == 0
    }
}

/// Rank-4 `(batch, channels, height, width)` tensor living on a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicTensor<T: Real = f32>(Tensor<T>);

impl<T: Real> PeriodicTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::contract(format!(
                "periodic tensors need power-of-two sizes, got {h}x{w}"
            )));
        }
        Ok(Self(t))
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(&shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }
}

/// `out[.., i, j] = x[.., (i - dy) mod H, (j - dx) mod W]`.
pub fn cyclic_translate<T: Real>(x: &PeriodicTensor<T>, s: Shift2D) -> PeriodicTensor<T> {
    PeriodicTensor(roll(&x.0, s.dy, s.dx))
}

/// Stride-1 cross-correlation with wrap-around indexing.
pub fn circular_conv2d<T: Real>(
    x: &PeriodicTensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<PeriodicTensor<T>> {
    let mut y = conv2d_forward(&x.0, weights, PadMode::Circular)?;
    if let Some(b) = bias {
        let (n, c, h, w) = y.dims4()?;
        if b.len() != c {
            return Err(Error::contract(format!("bias length {} != {c} channels", b.len())));
        }
        let hw = h * w;
        let d = y.data_mut();
        for ni in 0..n {
            for (ci, &bv) in b.iter().enumerate() {
                for v in &mut d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(PeriodicTensor(y))
}

/// Binomial `[1, 3, 3, 1]` resampling filter.
pub fn default_blur() -> Vec<f64> {
    vec![1.0, 3.0, 3.0, 1.0]
}

fn normalized(taps: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = taps.iter().sum();
    if taps.is_empty() || s.abs() < 1e-12 {
        return Err(Error::contract("resampling filter must have nonzero sum"));
    }
    Ok(taps.iter().map(|t| t / s).collect())
}

/// Filter origin used after zero-stuffing.
pub fn upsample_origin(len: usize) -> usize {
    len / 2
}

/// Filter origin used before decimation.
pub fn downsample_origin(len: usize) -> usize {
    (len - 1) / 2
}

/// Zero-stuff by two and blur circularly; output is `2H x 2W`.
///
/// The blur is normalized to unit sum and then scaled by the zero-stuffing
/// gain of 2 per axis, so constants map to the same constant.
pub fn circular_upsample2x<T: Real>(x: &PeriodicTensor<T>, blur: &[f64]) -> Result<PeriodicTensor<T>> {
    let taps: Vec<f64> = normalized(blur)?.iter().map(|t| 2.0 * t).collect();
    let o = upsample_origin(taps.len());
    let z = zero_stuff2x(&x.0);
    let z = filter1d(&z, &taps, o, Axis::Height, PadMode::Circular);
    Ok(PeriodicTensor(filter1d(&z, &taps, o, Axis::Width, PadMode::Circular)))
}

/// Blur circularly, then keep every other row and column.
pub fn circular_downsample2x<T: Real>(x: &PeriodicTensor<T>, blur: &[f64]) -> Result<PeriodicTensor<T>> {
    let (_, _, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
        return Err(Error::contract(format!("cannot halve a {h}x{w} map")));
    }
    let taps = normalized(blur)?;
    let o = downsample_origin(taps.len());
    let y = filter1d(&x.0, &taps, o, Axis::Height, PadMode::Circular);
    let y = filter1d(&y, &taps, o, Axis::Width, PadMode::Circular);
    Ok(PeriodicTensor(decimate2x(&y)))
}

/// Scale `weights[o, i, .., ..]` by `style[i]`, then optionally rescale each
/// output filter to unit L2 norm (with `eps` inside the square root).
pub fn modulate_weights<T: Real>(
    weights: &Tensor<T>,
    style: &[T],
    demodulate: bool,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = weights.shape();
    if s.len() != 4 {
        return Err(Error::contract("weights must be (Cout, Cin, k, k)"));
    }
    let (cout, cin, kk) = (s[0], s[1], s[2] * s[3]);
    if style.len() != cin {
        return Err(Error::contract(format!(
            "style length {} does not match {cin} input channels",
            style.len()
        )));
    }
    let mut w = weights.clone();
    let d = w.data_mut();
    for o in 0..cout {
        for i in 0..cin {
            for v in &mut d[(o * cin + i) * kk..(o * cin + i + 1) * kk] {
                *v *= style[i];
            }
        }
        if demodulate {
            let f = &mut d[o * cin * kk..(o + 1) * cin * kk];
            let ss: T = f.iter().map(|v| *v * *v).sum();
            let scale = T::one() / (ss + T::c(eps)).sqrt();
            for v in f {
                *v *= scale;
            }
        }
    }
    Ok(w)
}

/// StyleGAN2-style weight modulation followed by a circular convolution.
pub fn modulated_circular_conv2d<T: Real>(
    x: &PeriodicTensor<T>,
    weights: &Tensor<T>,
    style: &[T],
    demodulate: bool,
) -> Result<PeriodicTensor<T>> {
    let w = modulate_weights(weights, style, demodulate, DEMOD_EPS)?;
    circular_conv2d(x, &w, None)
}

pub const DEMOD_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// kernels

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Cyclic roll of the two trailing axes.
pub(crate) fn roll<T: Real>(x: &Tensor<T>, dy: i64, dx: i64) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let sy = dy.rem_euclid(h as i64) as usize;
    let sx = dx.rem_euclid(w as i64) as usize;
    if sy == 0 && sx == 0 {
        return x.clone();
    }
    let mut out = Tensor::zeros(s);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let si = (i + h - sy) % h;
            let srow = &src[base + si * w..base + (si + 1) * w];
            let drow = &mut dst[base + i * w..base + (i + 1) * w];
            // drow[j] = srow[(j - sx) mod w]
            drow[sx..].copy_from_slice(&srow[..w - sx]);
            drow[..sx].copy_from_slice(&srow[w - sx..]);
        }
    }
    out
}

/// Fill one sample's im2col matrix `(Cin*k*k, H*W)`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, pad: PadMode, col: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = &mut col[((c * k + u) * k + v) * hw..((c * k + u) * k + v + 1) * hw];
                let off = v as isize - r;
                for i in 0..h {
                    let si = i as isize + u as isize - r;
                    let dst = &mut row[i * w..(i + 1) * w];
                    match pad {
                        PadMode::Circular => {
                            let src = &plane[wrap(si, h) * w..(wrap(si, h) + 1) * w];
                            // dst[j] = src[(j + off) mod w]
                            let s0 = wrap(off, w);
                            dst[..w - s0].copy_from_slice(&src[s0..]);
                            dst[w - s0..].copy_from_slice(&src[..s0]);
                        }
                        PadMode::Zero => {
                            if si < 0 || si >= h as isize {
                                dst.fill(T::zero());
                                continue;
                            }
                            let src = &plane[si as usize * w..(si as usize + 1) * w];
                            for (j, d) in dst.iter_mut().enumerate() {
                                let sj = j as isize + off;
                                *d = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, pad: PadMode, x: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = &col[((c * k + u) * k + v) * hw..((c * k + u) * k + v + 1) * hw];
                let off = v as isize - r;
                for i in 0..h {
                    let si = i as isize + u as isize - r;
                    let src = &row[i * w..(i + 1) * w];
                    match pad {
                        PadMode::Circular => {
                            let si = wrap(si, h);
                            let dst = &mut plane[si * w..(si + 1) * w];
                            let s0 = wrap(off, w);
                            for (d, &s) in dst[s0..].iter_mut().zip(&src[..w - s0]) {
                                *d += s;
                            }
                            for (d, &s) in dst[..s0].iter_mut().zip(&src[w - s0..]) {
                                *d += s;
                            }
                        }
                        PadMode::Zero => {
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                            for (j, &s) in src.iter().enumerate() {
                                let sj = j as isize + off;
                                if sj >= 0 && sj < w as isize {
                                    dst[sj as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, wt: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = x.dims4()?;
    let ws = wt.shape();
    if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::contract(format!("conv weights must be (Cout, Cin, k, k) with odd k, got {ws:?}")));
    }
    if ws[1] != cin {
        return Err(Error::contract(format!(
            "conv expects {} input channels, got {cin}",
            ws[1]
        )));
    }
    Ok((n, cin, h, w, ws[0], ws[2]))
}

pub(crate) fn conv2d_forward<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, pad: PadMode) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, k) = conv_dims(x, wt)?;
    let hw = h * w;
    let ck = cin * k * k;
    let mut y = Tensor::zeros(&[n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ck * hw] };
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let colr: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, w, k, pad, &mut col);
            &col
        };
        let ys = &mut y.data_mut()[ni * cout * hw..(ni + 1) * cout * hw];
        T::gemm(cout, ck, hw, T::one(), wt.data(), ck as isize, 1, colr, hw as isize, 1, T::zero(), ys, hw as isize, 1);
    }
    Ok(y)
}

/// Gradients of a convolution with respect to its input and weights.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    gy: &Tensor<T>,
    pad: PadMode,
    need_gx: bool,
    need_gw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, h, w, cout, k) = conv_dims(x, wt)?;
    let hw = h * w;
    let ck = cin * k * k;
    let mut gx = need_gx.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_gw.then(|| Tensor::zeros(wt.shape()));
    let mut col = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
    let mut gcol = vec![T::zero(); if need_gx && k != 1 { ck * hw } else { 0 }];
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let gys = &gy.data()[ni * cout * hw..(ni + 1) * cout * hw];
        if let Some(gw) = gw.as_mut() {
            let colr: &[T] = if k == 1 {
                xs
            } else {
                im2col(xs, cin, h, w, k, pad, &mut col);
                &col
            };
            // gw[cout, ck] += gy[cout, hw] @ col[ck, hw]^T
            T::gemm(cout, hw, ck, T::one(), gys, hw as isize, 1, colr, 1, hw as isize, T::one(), gw.data_mut(), ck as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
            if k == 1 {
                T::gemm(ck, cout, hw, T::one(), wt.data(), 1, ck as isize, gys, hw as isize, 1, T::one(), gxs, hw as isize, 1);
            } else {
                T::gemm(ck, cout, hw, T::one(), wt.data(), 1, ck as isize, gys, hw as isize, 1, T::zero(), &mut gcol, hw as isize, 1);
                col2im(&gcol, cin, h, w, k, pad, gxs);
            }
        }
    }
    Ok((gx, gw))
}

/// 1-D correlation along one spatial axis: `y[i] = sum_t taps[t] * x[i + t - origin]`.
pub(crate) fn filter1d<T: Real>(x: &Tensor<T>, taps: &[f64], origin: usize, axis: Axis, pad: PadMode) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let tv: Vec<T> = taps.iter().map(|&t| T::c(t)).collect();
    let mut out = Tensor::zeros(s);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        let xs = &src[base..base + h * w];
        let ys = &mut dst[base..base + h * w];
        match axis {
            Axis::Width => {
                for i in 0..h {
                    let xr = &xs[i * w..(i + 1) * w];
                    let yr = &mut ys[i * w..(i + 1) * w];
                    for (t, &tap) in tv.iter().enumerate() {
                        if tap == T::zero() {
                            continue;
                        }
                        let off = t as isize - origin as isize;
                        for (j, y) in yr.iter_mut().enumerate() {
                            let sj = j as isize + off;
                            match pad {
                                PadMode::Circular => *y += tap * xr[wrap(sj, w)],
                                PadMode::Zero => {
                                    if sj >= 0 && sj < w as isize {
                                        *y += tap * xr[sj as usize]
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Axis::Height => {
                for i in 0..h {
                    let yr = &mut ys[i * w..(i + 1) * w];
                    for (t, &tap) in tv.iter().enumerate() {
                        if tap == T::zero() {
                            continue;
                        }
                        let si = i as isize + t as isize - origin as isize;
                        let si = match pad {
                            PadMode::Circular => wrap(si, h),
                            PadMode::Zero => {
                                if si < 0 || si >= h as isize {
                                    continue;
                                }
                                si as usize
                            }
                        };
                        for (y, &v) in yr.iter_mut().zip(&xs[si * w..(si + 1) * w]) {
                            *y += tap * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`filter1d`] with the same taps.
pub(crate) fn filter1d_adjoint<T: Real>(g: &Tensor<T>, taps: &[f64], origin: usize, axis: Axis, pad: PadMode) -> Tensor<T> {
    let rev: Vec<f64> = taps.iter().rev().copied().collect();
    filter1d(g, &rev, taps.len() - 1 - origin, axis, pad)
}

/// `y[2i, 2j] = x[i, j]`, zeros elsewhere.
pub(crate) fn zero_stuff2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes = x.numel() / (h * w);
    let mut shape = s.to_vec();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dst[p * 4 * h * w + (2 * i) * 2 * w + 2 * j] = x.data()[p * h * w + i * w + j];
            }
        }
    }
    out
}

/// `y[i, j] = x[2i, 2j]`.
pub(crate) fn decimate2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes = x.numel() / (h * w);
    let (ho, wo) = (h / 2, w / 2);
    let mut shape = s.to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                dst[p * ho * wo + i * wo + j] = x.data()[p * h * w + 2 * i * w + 2 * j];
            }
        }
    }
    out
}
