use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// `y = x * W^T + b` for `x: N x Din`, `W: Dout x Din`, `b: Dout`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din, dout) = dims(x, weight)?;
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias shape {:?}, expected [{dout}]", b.shape())));
        }
    }
    let mut out = vec![T::zero(); n * dout];
    if let Some(b) = bias {
        for row in out.chunks_mut(dout.max(1)) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, din, dout, T::one(), x.data(), false, weight.data(), true, T::one(), &mut out);
    let out = Tensor::new([n, dout], out)?;
    out.debug_assert_finite("linear");
    Ok(out)
}

fn dims<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected 2-D input and weight, got {:?} and {:?}", x.shape(), weight.shape()),
        ));
    }
    let (n, din) = (x.dim(0), x.dim(1));
    let (dout, wdin) = (weight.dim(0), weight.dim(1));
    if din != wdin {
        return Err(Error::shape("linear", format!("input features {din} != weight input features {wdin}")));
    }
    Ok((n, din, dout))
}

pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<LinearGrads<T>> {
    let (n, din, dout) = dims(x, weight)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape("linear_backward", format!("grad_out {:?}, expected [{n}, {dout}]", grad_out.shape())));
    }
    let dy = grad_out.data();
    let input = if need_input {
        let mut dx = vec![T::zero(); n * din];
        gemm(n, dout, din, T::one(), dy, false, weight.data(), false, T::zero(), &mut dx);
        Some(Tensor::new([n, din], dx)?)
    } else {
        None
    };
    let weight = if need_weight {
        let mut dw = vec![T::zero(); dout * din];
        gemm(dout, n, din, T::one(), dy, true, x.data(), false, T::zero(), &mut dw);
        Some(Tensor::new([dout, din], dw)?)
    } else {
        None
    };
    let bias = if need_bias {
        let mut db = vec![T::zero(); dout];
        for row in dy.chunks(dout.max(1)) {
            db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        Some(Tensor::new([dout], db)?)
    } else {
        None
    };
    Ok(LinearGrads { input, weight, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias_passes_through() {
        let x = Tensor::<f32>::new([2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap();
        let w = Tensor::<f32>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f32>::zeros([2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), x.data());
    }

    #[test]
    fn zero_weight_returns_bias_rows() {
        let x = Tensor::<f32>::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::<f32>::zeros([2, 2]);
        let b = Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn hand_multiplied_example() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::zeros([2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[11.0, 17.0]);
    }

    #[test]
    fn mismatched_inner_dimension_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 3]);
        let w = Tensor::<f32>::zeros([2, 2]);
        assert!(linear(&x, &w, None).unwrap_err().to_string().contains("input features 3"));
    }
}
