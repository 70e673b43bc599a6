//! Concatenation, dropout, element-wise arithmetic and row-segment helpers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

fn rows<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1)))
}

/// `[a; b]` along the column (channel) axis of two `N x _` matrices.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca) = rows("concat_channels", a)?;
    let (nb, cb) = rows("concat_channels", b)?;
    if na != nb {
        return Err(Error::shape("concat_channels", format!("batch sizes differ: {na} vs {nb}")));
    }
    let mut out = Vec::with_capacity(na * (ca + cb));
    for i in 0..na {
        out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::new([na, ca + cb], out)
}

pub fn split_channels<T: Element>(grad: &Tensor<T>, left: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c) = (grad.dim(0), grad.dim(1));
    let right = c - left;
    let mut a = Vec::with_capacity(n * left);
    let mut b = Vec::with_capacity(n * right);
    for row in grad.data().chunks(c.max(1)).take(n) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (Tensor::new([n, left], a).expect("split"), Tensor::new([n, right], b).expect("split"))
}

/// Inverted dropout. Returns the output and, in training mode, the per-element
/// multiplier (0 or `1/(1-p)`) needed for backward.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep: T = cst(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

pub fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let f = match op {
        Binary::Add => |x: T, y: T| x + y,
        Binary::Sub => |x: T, y: T| x - y,
        Binary::Mul => |x: T, y: T| x * y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape")
}

/// Mean of the rows of `x` sharing a segment id: `out[s] = mean{ x[i] : seg[i] == s }`.
/// Empty segments yield zero rows.
pub fn segment_mean<T: Element>(x: &Tensor<T>, segments: &[usize], count: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, d) = rows("segment_mean", x)?;
    if segments.len() != n {
        return Err(Error::shape("segment_mean", format!("{} segment ids for {n} rows", segments.len())));
    }
    if let Some(&bad) = segments.iter().find(|&&s| s >= count) {
        return Err(Error::InvalidArgument(format!("segment id {bad} out of range 0..{count}")));
    }
    let mut sizes = vec![0usize; count];
    let mut out = vec![T::zero(); count * d];
    for (i, &s) in segments.iter().enumerate() {
        sizes[s] += 1;
        let dst = &mut out[s * d..(s + 1) * d];
        dst.iter_mut().zip(&x.data()[i * d..(i + 1) * d]).for_each(|(o, &v)| *o = *o + v);
    }
    for (s, &k) in sizes.iter().enumerate() {
        if k > 0 {
            let inv: T = cst(1.0 / k as f64);
            out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    Ok((Tensor::new([count, d], out)?, sizes))
}

pub fn segment_mean_backward<T: Element>(segments: &[usize], sizes: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let d = grad_out.dim(1);
    let mut dx = Vec::with_capacity(segments.len() * d);
    for &s in segments {
        let inv: T = cst(1.0 / sizes[s] as f64);
        dx.extend(grad_out.data()[s * d..(s + 1) * d].iter().map(|&g| g * inv));
    }
    Tensor::new([segments.len(), d], dx).expect("segment shape")
}

pub fn gather_rows<T: Element>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = rows("gather_rows", x)?;
    let mut out = Vec::with_capacity(index.len() * d);
    for &i in index {
        if i >= n {
            return Err(Error::InvalidArgument(format!("gather index {i} out of range 0..{n}")));
        }
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new([index.len(), d], out)
}

pub fn gather_rows_backward<T: Element>(source_rows: usize, index: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let d = grad_out.dim(1);
    let mut dx = Tensor::zeros([source_rows, d]);
    let data = dx.data_mut();
    for (r, &i) in index.iter().enumerate() {
        for j in 0..d {
            data[i * d + j] = data[i * d + j] + grad_out.data()[r * d + j];
        }
    }
    dx
}

/// `sum_i w_i * sum_j x[i][j]` as a scalar.
pub fn weighted_row_sum<T: Element>(x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    let (n, d) = rows("weighted_row_sum", x)?;
    if weights.len() != n {
        return Err(Error::shape("weighted_row_sum", format!("{} weights for {n} rows", weights.len())));
    }
    let total = x
        .data()
        .chunks(d.max(1))
        .take(n)
        .zip(weights)
        .fold(T::zero(), |acc, (row, &w)| acc + w * row.iter().fold(T::zero(), |s, &v| s + v));
    Ok(Tensor::scalar(total))
}
