use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::{cst, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// Exact form `x * Phi(x) = 0.5 * x * (1 + erf(x / sqrt 2))`.
    Gelu,
    Sigmoid,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Element>(x: T) -> T {
    cst::<T>(0.5) * x * (T::one() + (x * cst(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = cst::<T>(0.5) * (T::one() + (x * cst(FRAC_1_SQRT_2)).erf());
    let pdf = cst::<T>(INV_SQRT_2PI) * (cst::<T>(-0.5) * x * x).exp();
    cdf + x * pdf
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` whose forward output was `y`.
    #[inline]
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
    out.debug_assert_finite("activation");
    out
}

pub fn activation_backward<T: Element>(x: &Tensor<T>, y: &Tensor<T>, kind: Activation, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
