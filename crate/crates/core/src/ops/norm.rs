//! Layer normalisation over one axis, applied independently at every other index.
//!
//! For an NCHW feature map and `axis = 1` this normalises the C channels at each
//! spatial position; for an `N x C` matrix it normalises each row.

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Saved forward intermediates: the normalised input and `1/sqrt(var + eps)`
/// per normalised slice.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

fn split<T: Element>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.rank() {
        return Err(Error::shape("layer_norm", format!("axis {axis} out of range for shape {:?}", x.shape())));
    }
    let outer = x.shape()[..axis].iter().product();
    let inner = x.shape()[axis + 1..].iter().product();
    Ok((outer, x.dim(axis), inner))
}

pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (outer, c, inner) = split(x, axis)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} do not match normalised extent {c}", gamma.shape(), beta.shape()),
        ));
    }
    let xs = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let inv_c: T = cst(1.0 / c as f64);
    let eps: T = cst(eps);
    let mut out = vec![T::zero(); xs.len()];
    let mut normalized = vec![T::zero(); xs.len()];
    let mut inv_std = vec![T::zero(); outer * inner];
    let mut mean = vec![T::zero(); inner];
    let mut var = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * c * inner;
        mean.fill(T::zero());
        var.fill(T::zero());
        for ci in 0..c {
            let row = &xs[base + ci * inner..base + (ci + 1) * inner];
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v);
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        for ci in 0..c {
            let row = &xs[base + ci * inner..base + (ci + 1) * inner];
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let istd = &mut inv_std[o * inner..(o + 1) * inner];
        for (i, s) in istd.iter_mut().zip(&var) {
            *i = T::one() / (*s * inv_c + eps).sqrt();
        }
        for ci in 0..c {
            let span = base + ci * inner..base + (ci + 1) * inner;
            let row = &xs[span.clone()];
            let nrow = &mut normalized[span.clone()];
            let orow = &mut out[span];
            for p in 0..inner {
                let xhat = (row[p] - mean[p]) * istd[p];
                nrow[p] = xhat;
                orow[p] = g[ci] * xhat + b[ci];
            }
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.debug_assert_finite("layer_norm");
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub struct LayerNormGrads<T> {
    pub input: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

pub fn layer_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &Tensor<T>,
    axis: usize,
    cache: &LayerNormCache<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LayerNormGrads<T>> {
    if grad_out.shape() != shape {
        return Err(Error::shape("layer_norm_backward", format!("grad_out {:?} vs {:?}", grad_out.shape(), shape)));
    }
    let (outer, c, inner) = split(grad_out, axis)?;
    let dy = grad_out.data();
    let g = gamma.data();
    let xhat = &cache.normalized;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for o in 0..outer {
        for ci in 0..c {
            let off = (o * c + ci) * inner;
            for p in 0..inner {
                dgamma[ci] = dgamma[ci] + dy[off + p] * xhat[off + p];
                dbeta[ci] = dbeta[ci] + dy[off + p];
            }
        }
    }
    let input = if need_input {
        let inv_c: T = cst(1.0 / c as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut sum_d = vec![T::zero(); inner];
        let mut sum_dx = vec![T::zero(); inner];
        for o in 0..outer {
            sum_d.fill(T::zero());
            sum_dx.fill(T::zero());
            for ci in 0..c {
                let off = (o * c + ci) * inner;
                for p in 0..inner {
                    let dxhat = dy[off + p] * g[ci];
                    sum_d[p] = sum_d[p] + dxhat;
                    sum_dx[p] = sum_dx[p] + dxhat * xhat[off + p];
                }
            }
            let istd = &cache.inv_std[o * inner..(o + 1) * inner];
            for ci in 0..c {
                let off = (o * c + ci) * inner;
                for p in 0..inner {
                    let dxhat = dy[off + p] * g[ci];
                    dx[off + p] = istd[p] * (dxhat - inv_c * sum_d[p] - xhat[off + p] * inv_c * sum_dx[p]);
                }
            }
        }
        Some(Tensor::new(shape.to_vec(), dx)?)
    } else {
        None
    };
    Ok(LayerNormGrads {
        input,
        gamma: Some(Tensor::new([c], dgamma)?),
        beta: Some(Tensor::new([c], dbeta)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_input_yields_beta() {
        let x = Tensor::<f32>::full([2, 3, 2, 2], 4.2);
        let gamma = Tensor::<f32>::full([3], 1.0);
        let beta = Tensor::<f32>::full([3], 0.7);
        let (y, _) = layer_norm(&x, &gamma, &beta, 1, DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn already_standardised_pair_is_unchanged() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, -1.0]).unwrap();
        let gamma = Tensor::<f64>::full([2], 1.0);
        let beta = Tensor::<f64>::zeros([2]);
        let (y, _) = layer_norm(&x, &gamma, &beta, 1, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn per_position_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::new([2, 8, 3, 3], (0..144).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let gamma = Tensor::<f32>::full([8], 1.0);
        let beta = Tensor::<f32>::zeros([8]);
        let (_, cache) = layer_norm(&x, &gamma, &beta, 1, DEFAULT_EPS).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..8).map(|c| cache.normalized[(n * 8 + c) * 9 + p] as f64).collect();
                let mean = vals.iter().sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(mean.abs() <= 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() <= 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn rejects_bad_affine_and_eps() {
        let x = Tensor::<f32>::zeros([2, 4]);
        let g3 = Tensor::<f32>::zeros([3]);
        let g4 = Tensor::<f32>::zeros([4]);
        assert!(layer_norm(&x, &g3, &g4, 1, 1e-6).is_err());
        assert!(layer_norm(&x, &g4, &g4, 1, 0.0).is_err());
    }
}
