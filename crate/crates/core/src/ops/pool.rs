//! Global average/max pooling (NCHW -> NC) and windowed max pooling.

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

fn nchw<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(op, format!("expected N x C x H x W, got {:?}", x.shape())));
    }
    let plane = x.dim(2) * x.dim(3);
    if plane == 0 {
        return Err(Error::shape(op, format!("empty spatial extent in {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), plane))
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = nchw("global_avg_pool", x)?;
    let inv: T = cst(1.0 / plane as f64);
    let data = x.data().chunks(plane).map(|p| super::conv::sum(p) * inv).collect();
    Tensor::new([n, c], data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv: T = cst(1.0 / plane as f64);
    let mut dx = Vec::with_capacity(grad_out.numel() * plane);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape.to_vec(), dx).expect("pool shape")
}

/// Channel maxima plus the flat input index of each winner (first in row-major order on ties).
pub fn global_max_pool<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, plane) = nchw("global_max_pool", x)?;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::with_capacity(n * c);
    for (i, p) in x.data().chunks(plane).enumerate() {
        let (mut best, mut at) = (p[0], 0);
        for (j, &v) in p.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                at = j;
            }
        }
        out.push(best);
        argmax.push(i * plane + at);
    }
    Ok((Tensor::new([n, c], out)?, argmax))
}

pub fn scatter_to_argmax<T: Element>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        d[at] = d[at] + g;
    }
    dx
}

/// Non-overlapping `k x k` max pooling with stride `k` (trailing rows/cols dropped).
pub fn max_pool2d<T: Element>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let _ = nchw("max_pool2d", x)?;
    if k == 0 {
        return Err(Error::InvalidArgument("max_pool2d window must be >= 1".into()));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / k, w / k);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("max_pool2d", format!("window {k} larger than spatial extent {h}x{w}")));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut at = base + oy * k * w + ox * k;
                let mut best = xs[at];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if xs[idx] > best {
                            best = xs[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}
