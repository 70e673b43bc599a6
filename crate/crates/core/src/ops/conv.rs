//! 2-D convolution (cross-correlation, zero padding) over NCHW tensors.
//!
//! Three kernels share one contract: a direct loop for depthwise filters,
//! a GEMM for 1x1 stride-1 filters, and im2col + GEMM for everything else.
//! Work is split per sample (and per channel for depthwise) so every output
//! element is produced by the same sequential code whatever the pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }
}

fn geometry(input: &[usize], weight: &[usize], bias: Option<&[usize]>, spec: Conv2dSpec) -> Result<Geometry> {
    if input.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be N x C x H x W, got {input:?}")));
    }
    if weight.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be Cout x Cin/groups x kh x kw, got {weight:?}")));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if spec.groups == 0 {
        return Err(Error::InvalidArgument("conv2d groups must be >= 1".into()));
    }
    let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if cin % spec.groups != 0 {
        return Err(Error::shape("conv2d", format!("input channels {cin} not divisible by groups {}", spec.groups)));
    }
    if cout % spec.groups != 0 {
        return Err(Error::shape("conv2d", format!("output channels {cout} not divisible by groups {}", spec.groups)));
    }
    if cin_g != cin / spec.groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight dim 1 (input channels per group) is {cin_g}, expected {}", cin / spec.groups),
        ));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape("conv2d", "kernel extent must be >= 1"));
    }
    if h + 2 * spec.padding < kh {
        return Err(Error::shape("conv2d", format!("padded height {} smaller than kernel height {kh}", h + 2 * spec.padding)));
    }
    if w + 2 * spec.padding < kw {
        return Err(Error::shape("conv2d", format!("padded width {} smaller than kernel width {kw}", w + 2 * spec.padding)));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {b:?} does not match output channels {cout}")));
        }
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
        ow: (w + 2 * spec.padding - kw) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
        groups: spec.groups,
    })
}

/// Output spatial extent for one axis.
pub fn conv_output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
    let mut out = vec![T::zero(); g.n * g.cout * g.out_plane()];
    let x = input.data();
    let wt = weight.data();
    let b = bias.map(|b| b.data());
    if g.n > 0 && g.out_plane() > 0 {
        if g.is_depthwise() {
            depthwise_forward(&g, x, wt, b, &mut out);
        } else if g.is_pointwise() {
            pointwise_forward(&g, x, wt, b, &mut out);
        } else {
            im2col_forward(&g, x, wt, b, &mut out);
        }
    }
    let out = Tensor::new([g.n, g.cout, g.oh, g.ow], out)?;
    out.debug_assert_finite("conv2d");
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of `conv2d` given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input.shape(), weight.shape(), None, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} vs expected {:?}", grad_out.shape(), [g.n, g.cout, g.oh, g.ow]),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();

    let (dx, dw) = if g.is_depthwise() {
        depthwise_backward(&g, x, wt, dy, need_input, need_weight)
    } else if g.is_pointwise() {
        pointwise_backward(&g, x, wt, dy, need_input, need_weight)
    } else {
        im2col_backward(&g, x, wt, dy, need_input, need_weight)
    };

    let db = need_bias.then(|| {
        let plane = g.out_plane();
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = (n * g.cout + c) * plane;
                *acc = *acc + sum(&dy[off..off + plane]);
            }
        }
        db
    });

    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new([g.cout], d)).transpose()?,
    })
}

// Eight independent partial sums let the compiler vectorise; the order is fixed.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] = acc[l] + a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn sum<T: Element>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] = acc[l] + a[i * 8 + l];
        }
    }
    let mut tail = T::zero();
    for &v in &a[chunks * 8..] {
        tail = tail + v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + alpha * x;
    }
}

/// Output column range `[lo, hi)` whose input column `o*stride + k - pad` lies in `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  <=>  o >= ceil((pad - k) / stride)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= size - 1  <=>  o <= (size - 1 + pad - k) / stride
    let hi = if size + pad < k + 1 { 0 } else { ((size - 1 + pad - k) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

fn depthwise_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    out.par_chunks_mut(op).enumerate().for_each(|(nc, o)| {
        let c = nc % g.cin;
        let xin = &x[nc * ip..(nc + 1) * ip];
        let wk = &w[c * ks..(c + 1) * ks];
        o.fill(b.map_or(T::zero(), |b| b[c]));
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let wv = wk[ky * g.kw + kx];
                let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let orow = &mut o[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        axpy(wv, &xin[iy * g.w + ix0..iy * g.w + ix0 + orow.len()], orow);
                    } else {
                        for (j, ov) in orow.iter_mut().enumerate() {
                            *ov = *ov + wv * xin[iy * g.w + ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    });
}

fn depthwise_backward<T: Element>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); g.n * g.cin * ip];
        dx.par_chunks_mut(ip).enumerate().for_each(|(nc, dxp)| {
            let c = nc % g.cin;
            let dyp = &dy[nc * op..(nc + 1) * op];
            let wk = &w[c * ks..(c + 1) * ks];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dyp[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            axpy(wv, drow, &mut dxp[iy * g.w + ix0..iy * g.w + ix0 + drow.len()]);
                        } else {
                            for (j, &d) in drow.iter().enumerate() {
                                let v = &mut dxp[iy * g.w + ix0 + j * g.stride];
                                *v = *v + wv * d;
                            }
                        }
                    }
                }
            }
        });
        dx
    });
    let dw = need_weight.then(|| {
        let mut dw = vec![T::zero(); g.cout * ks];
        dw.par_chunks_mut(ks).enumerate().for_each(|(c, dwk)| {
            for n in 0..g.n {
                let nc = n * g.cin + c;
                let xin = &x[nc * ip..(nc + 1) * ip];
                let dyp = &dy[nc * op..(nc + 1) * op];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &dyp[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                acc = acc + dot(drow, &xin[iy * g.w + ix0..iy * g.w + ix0 + drow.len()]);
                            } else {
                                for (j, &d) in drow.iter().enumerate() {
                                    acc = acc + d * xin[iy * g.w + ix0 + j * g.stride];
                                }
                            }
                        }
                        let slot = &mut dwk[ky * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        });
        dw
    });
    (dx, dw)
}

fn fill_bias<T: Element>(o: &mut [T], b: Option<&[T]>, channels: usize, plane: usize) {
    match b {
        Some(b) => {
            for c in 0..channels {
                o[c * plane..(c + 1) * plane].fill(b[c]);
            }
        }
        None => o.fill(T::zero()),
    }
}

fn pointwise_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    out.par_chunks_mut(g.cout * op).enumerate().for_each(|(n, o)| {
        fill_bias(o, b, g.cout, op);
        let xn = &x[n * g.cin * ip..(n + 1) * g.cin * ip];
        gemm(g.cout, g.cin, op, T::one(), w, false, xn, false, T::one(), o);
    });
}

fn pointwise_backward<T: Element>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); g.n * g.cin * ip];
        dx.par_chunks_mut(g.cin * ip).enumerate().for_each(|(n, dxn)| {
            let dyn_ = &dy[n * g.cout * op..(n + 1) * g.cout * op];
            gemm(g.cin, g.cout, op, T::one(), w, true, dyn_, false, T::zero(), dxn);
        });
        dx
    });
    let dw = need_weight.then(|| {
        let partials: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|n| {
                let mut part = vec![T::zero(); g.cout * g.cin];
                let dyn_ = &dy[n * g.cout * op..(n + 1) * g.cout * op];
                let xn = &x[n * g.cin * ip..(n + 1) * g.cin * ip];
                gemm(g.cout, op, g.cin, T::one(), dyn_, false, xn, true, T::zero(), &mut part);
                part
            })
            .collect();
        reduce_in_order(partials, g.cout * g.cin)
    });
    (dx, dw)
}

fn reduce_in_order<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![T::zero(); len]);
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, &v)| *a = *a + v);
    }
    acc
}

/// Unfolds one group of one sample into a `(cin_g*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Element>(g: &Geometry, xg: &[T], col: &mut [T]) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    for ci in 0..g.cin_g() {
        let plane = &xg[ci * ip..(ci + 1) * ip];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * op..(row + 1) * op];
                dst.fill(T::zero());
                let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[oy * g.ow + ox] = plane[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &Geometry, col: &[T], dxg: &mut [T]) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    for ci in 0..g.cin_g() {
        let plane = &mut dxg[ci * ip..(ci + 1) * ip];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * op..(row + 1) * op];
                let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        plane[iy * g.w + ix] = plane[iy * g.w + ix] + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let kdim = g.cin_g() * g.kh * g.kw;
    out.par_chunks_mut(g.cout * op).enumerate().for_each(|(n, o)| {
        fill_bias(o, b, g.cout, op);
        let mut col = vec![T::zero(); kdim * op];
        for grp in 0..g.groups {
            let xg = &x[(n * g.cin + grp * g.cin_g()) * ip..(n * g.cin + (grp + 1) * g.cin_g()) * ip];
            im2col(g, xg, &mut col);
            let wg = &w[grp * g.cout_g() * kdim..(grp + 1) * g.cout_g() * kdim];
            let og = &mut o[grp * g.cout_g() * op..(grp + 1) * g.cout_g() * op];
            gemm(g.cout_g(), kdim, op, T::one(), wg, false, &col, false, T::one(), og);
        }
    });
}

fn im2col_backward<T: Element>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let kdim = g.cin_g() * g.kh * g.kw;
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); g.n * g.cin * ip];
        dx.par_chunks_mut(g.cin * ip).enumerate().for_each(|(n, dxn)| {
            let mut col = vec![T::zero(); kdim * op];
            for grp in 0..g.groups {
                let wg = &w[grp * g.cout_g() * kdim..(grp + 1) * g.cout_g() * kdim];
                let dyg = &dy[(n * g.cout + grp * g.cout_g()) * op..(n * g.cout + (grp + 1) * g.cout_g()) * op];
                gemm(kdim, g.cout_g(), op, T::one(), wg, true, dyg, false, T::zero(), &mut col);
                col2im_add(g, &col, &mut dxn[grp * g.cin_g() * ip..(grp + 1) * g.cin_g() * ip]);
            }
        });
        dx
    });
    let dw = need_weight.then(|| {
        let partials: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|n| {
                let mut part = vec![T::zero(); g.cout * kdim];
                let mut col = vec![T::zero(); kdim * op];
                for grp in 0..g.groups {
                    let xg = &x[(n * g.cin + grp * g.cin_g()) * ip..(n * g.cin + (grp + 1) * g.cin_g()) * ip];
                    im2col(g, xg, &mut col);
                    let dyg = &dy[(n * g.cout + grp * g.cout_g()) * op..(n * g.cout + (grp + 1) * g.cout_g()) * op];
                    let pg = &mut part[grp * g.cout_g() * kdim..(grp + 1) * g.cout_g() * kdim];
                    gemm(g.cout_g(), op, kdim, T::one(), dyg, false, &col, true, T::zero(), pg);
                }
                part
            })
            .collect();
        reduce_in_order(partials, g.cout * kdim)
    });
    (dx, dw)
}
