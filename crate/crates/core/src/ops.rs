//! Forward and backward kernels for the volumetric layer primitives.
//!
//! All spatial operators pad by edge replication: an out-of-range input
//! coordinate is clamped to the nearest valid plane.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output extent `floor((n + 2 pad - k) / stride) + 1`, or `None` when the
/// padded input is shorter than the kernel.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || n == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Window {
    pub fn new(in_dims: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = out_extent(in_dims[a], k, stride, pad)
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::EmptyOutput(format!(
                        "extent {} with kernel {k}, stride {stride}, pad {pad}",
                        in_dims[a]
                    ))
                })?;
        }
        Ok(Self {
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    /// `table[kk * out + o]` is the clamped input coordinate read by output
    /// `o` at kernel tap `kk` along `axis`.
    fn tap_table(&self, axis: usize) -> Vec<usize> {
        let n = self.in_dims[axis] as isize;
        let out = self.out_dims[axis];
        let mut t = Vec::with_capacity(self.k * out);
        for kk in 0..self.k {
            for o in 0..out {
                let i = (o * self.stride + kk) as isize - self.pad as isize;
                t.push(i.clamp(0, n - 1) as usize);
            }
        }
        t
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Explicit edge-replicated padding of a `[C, D, H, W]` tensor.
pub fn replicate_pad<T: Real>(input: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let c = input.channels()?;
    let [d, h, w] = input.spatial()?;
    let dims = [d + 2 * pad, h + 2 * pad, w + 2 * pad];
    let clamp = |i: usize, n: usize| (i as isize - pad as isize).clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(c * dims.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    out.push(input.at4(ch, clamp(z, d), clamp(y, h), clamp(x, w)));
                }
            }
        }
    }
    Tensor::new(vec![c, dims[0], dims[1], dims[2]], out)
}

/// Unfolds replicate-padded windows into a `[C * k^3, V]` column matrix.
fn im2col<T: Real>(x: &[T], channels: usize, win: &Window) -> Vec<T> {
    let k = win.k;
    let [d, h, w] = win.in_dims;
    let [od, oh, ow] = win.out_dims;
    let v = win.out_voxels();
    let (td, th, tw) = (win.tap_table(0), win.tap_table(1), win.tap_table(2));
    let mut col = vec![T::zero(); channels * k * k * k * v];
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[row * v..(row + 1) * v];
                    let tw_row = &tw[kw * ow..(kw + 1) * ow];
                    let mut idx = 0;
                    for &iz in &td[kd * od..(kd + 1) * od] {
                        for &iy in &th[kh * oh..(kh + 1) * oh] {
                            let base = (iz * h + iy) * w;
                            for &ix in tw_row {
                                dst[idx] = plane[base + ix];
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im<T: Real>(col: &[T], channels: usize, win: &Window, dx: &mut [T]) {
    let k = win.k;
    let [d, h, w] = win.in_dims;
    let [od, oh, ow] = win.out_dims;
    let v = win.out_voxels();
    let (td, th, tw) = (win.tap_table(0), win.tap_table(1), win.tap_table(2));
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * v..(row + 1) * v];
                    let tw_row = &tw[kw * ow..(kw + 1) * ow];
                    let mut idx = 0;
                    for &iz in &td[kd * od..(kd + 1) * od] {
                        for &iy in &th[kh * oh..(kh + 1) * oh] {
                            let base = (iz * h + iy) * w;
                            for &ix in tw_row {
                                plane[base + ix] += src[idx];
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Saved state of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub window: Window,
    pub c_in: usize,
    pub c_out: usize,
    /// Unfolded input; `None` when the window is the identity and the input
    /// itself serves as the column matrix.
    col: Option<Vec<T>>,
}

fn check_conv_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let c_in = input.channels()?;
    let (c_out, kc, k) = match kernel.shape() {
        &[o, c, k0, k1, k2] if k0 == k1 && k1 == k2 => (o, c, k0),
        s => return Err(Error::Shape(format!("kernel must be [O, C, k, k, k], got {:?}", s))),
    };
    if kc != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "bias must be [{c_out}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok((c_in, c_out, k))
}

/// 3-D convolution with replicate padding.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (c_in, c_out, k) = check_conv_shapes(input, kernel, bias)?;
    let window = Window::new(input.spatial()?, k, stride, pad)?;
    let v = window.out_voxels();
    let kdim = c_in * k * k * k;
    let col = if window.is_identity() {
        None
    } else {
        Some(im2col(input.data(), c_in, &window))
    };
    let cols: &[T] = col.as_deref().unwrap_or(input.data());
    let mut out = vec![T::zero(); c_out * v];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(v).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        c_out,
        kdim,
        v,
        T::one(),
        kernel.data(),
        (kdim as isize, 1),
        cols,
        (v as isize, 1),
        beta,
        &mut out,
        (v as isize, 1),
    );
    let [od, oh, ow] = window.out_dims;
    let out = Tensor::new(vec![c_out, od, oh, ow], out)?;
    Ok((
        out,
        ConvCache {
            window,
            c_in,
            c_out,
            col,
        },
    ))
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`.
///
/// `d_input` is only computed when `need_input` is set.
pub fn conv3d_backward<T: Real>(
    cache: &ConvCache<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let win = &cache.window;
    let v = win.out_voxels();
    let k = win.k;
    let kdim = cache.c_in * k * k * k;
    let cols: &[T] = cache.col.as_deref().unwrap_or(input.data());
    let dy = grad_out.data();

    let mut dk = vec![T::zero(); cache.c_out * kdim];
    T::gemm(
        cache.c_out,
        v,
        kdim,
        T::one(),
        dy,
        (v as isize, 1),
        cols,
        (1, v as isize),
        T::zero(),
        &mut dk,
        (kdim as isize, 1),
    );
    let db: Vec<T> = dy.chunks(v).map(|row| row.iter().copied().sum()).collect();

    let dx = need_input.then(|| {
        let mut dcol = vec![T::zero(); kdim * v];
        T::gemm(
            kdim,
            cache.c_out,
            v,
            T::one(),
            kernel.data(),
            (1, kdim as isize),
            dy,
            (v as isize, 1),
            T::zero(),
            &mut dcol,
            (v as isize, 1),
        );
        if win.is_identity() {
            Tensor::new(input.shape().to_vec(), dcol).expect("identity window keeps shape")
        } else {
            let mut dx = vec![T::zero(); input.len()];
            col2im(&dcol, cache.c_in, win, &mut dx);
            Tensor::new(input.shape().to_vec(), dx).expect("input shape")
        }
    });
    (
        dx,
        Tensor::new(kernel.shape().to_vec(), dk).expect("kernel shape"),
        Tensor::new(vec![cache.c_out], db).expect("bias shape"),
    )
}

/// Max pooling with replicate padding; returns the output and, per output
/// voxel, the flat input index of the first maximum in scan order.
pub fn maxpool3d_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let c = input.channels()?;
    let win = Window::new(input.spatial()?, k, stride, pad)?;
    let [d, h, w] = win.in_dims;
    let [od, oh, ow] = win.out_dims;
    let (td, th, tw) = (win.tap_table(0), win.tap_table(1), win.tap_table(2));
    let x = input.data();
    let mut out = Vec::with_capacity(c * win.out_voxels());
    let mut argmax = Vec::with_capacity(c * win.out_voxels());
    for ch in 0..c {
        let base_c = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kd in 0..k {
                        let iz = td[kd * od + z];
                        for kh in 0..k {
                            let iy = th[kh * oh + y];
                            let row = base_c + (iz * h + iy) * w;
                            for kw in 0..k {
                                let i = row + tw[kw * ow + xo];
                                let val = x[i];
                                if best_i == usize::MAX || val > best {
                                    best = val;
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, od, oh, ow], out)?, argmax))
}

pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let g = dx.data_mut();
    for (&i, &dy) in argmax.iter().zip(grad_out.data()) {
        g[i] += dy;
    }
    dx
}

/// Instance normalization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Per-instance, per-channel statistics over all spatial positions.
    #[default]
    Live,
    /// Statistics bypassed: `gamma * x + beta`. Keeps every layer local.
    FixedAffine,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    mode: NormMode,
    /// Normalized input (live mode only).
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

pub fn instance_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: NormMode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = input.channels()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "affine parameters must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let n: usize = input.spatial()?.iter().product();
    let mut out = Vec::with_capacity(input.len());
    let mut xhat = Vec::new();
    let mut inv_std = Vec::new();
    match mode {
        NormMode::Live => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "live instance normalization needs at least two spatial positions".into(),
                ));
            }
            xhat.reserve(input.len());
            let nf = T::of(n as f64);
            for (ch, xs) in input.data().chunks(n).enumerate() {
                let mean = xs.iter().copied().sum::<T>() / nf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).libm_sqrt();
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for &v in xs {
                    let xh = (v - mean) * inv;
                    xhat.push(xh);
                    out.push(g * xh + b);
                }
                inv_std.push(inv);
            }
        }
        NormMode::FixedAffine => {
            for (ch, xs) in input.data().chunks(n).enumerate() {
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                out.extend(xs.iter().map(|&v| g * v + b));
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        NormCache {
            mode,
            xhat,
            inv_std,
        },
    ))
}

/// Gradients of instance normalization: `(d_input, d_gamma, d_beta)`.
pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let n = input.len() / c;
    let mut dx = Vec::with_capacity(input.len());
    let mut dg = Vec::with_capacity(c);
    let mut db = Vec::with_capacity(c);
    for ch in 0..c {
        let dy = &grad_out.data()[ch * n..(ch + 1) * n];
        let g = gamma.data()[ch];
        match cache.mode {
            NormMode::Live => {
                let xh = &cache.xhat[ch * n..(ch + 1) * n];
                let inv = cache.inv_std[ch];
                let sum_dy: T = dy.iter().copied().sum();
                let sum_dy_xh: T = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                dg.push(sum_dy_xh);
                db.push(sum_dy);
                let nf = T::of(n as f64);
                let scale = g * inv / nf;
                for (&d, &x) in dy.iter().zip(xh) {
                    dx.push(scale * (nf * d - sum_dy - x * sum_dy_xh));
                }
            }
            NormMode::FixedAffine => {
                let xs = &input.data()[ch * n..(ch + 1) * n];
                dg.push(dy.iter().zip(xs).map(|(&a, &b)| a * b).sum());
                db.push(dy.iter().copied().sum());
                dx.extend(dy.iter().map(|&d| d * g));
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("input shape"),
        Tensor::new(vec![c], dg).expect("gamma shape"),
        Tensor::new(vec![c], db).expect("beta shape"),
    )
}

/// Lower clamp applied to probabilities before any logarithm; the upper
/// clamp is `1 - PROB_FLOOR`.
pub const PROB_FLOOR: f64 = 1e-7;

#[inline]
pub fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::of(PROB_FLOOR);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Logistic sigmoid, clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    clamp_prob(T::one() / (T::one() + (-x).libm_exp()))
}
