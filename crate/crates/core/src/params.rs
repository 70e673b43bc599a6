//! Named parameter tensors and their initialisation.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from unique parameter names to tensors. Order is insertion
/// order, which is also the checkpoint order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

pub type ModelParams = ParamStore<f32>;

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Places every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`,
    /// naming the first tensor that differs.
    pub fn check_layout<U: Element>(&self, reference: &ParamStore<U>) -> Result<()> {
        for (name, want) in reference.iter() {
            match self.tensors.get(name) {
                None => return Err(Error::InvalidArgument(format!("missing parameter {name:?} (expected shape {:?})", want.shape()))),
                Some(have) if have.shape() != want.shape() => {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {name:?} has shape {:?}, model expects {:?}",
                        have.shape(),
                        want.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.names().find(|n| !reference.contains(n)) {
            return Err(Error::InvalidArgument(format!("unexpected parameter {extra:?} for this model")));
        }
        Ok(())
    }
}

/// Tape handles for a registered [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name:?} not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects the gradients left on the tape into a store keyed like the parameters.
    pub fn gradients<T: Element>(&self, tape: &Tape<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let value = tape.value(v);
            let g = tape.grad(v).map_or_else(|| vec![T::zero(); value.numel()], <[T]>::to_vec);
            out.insert(name.clone(), Tensor::new(value.shape().to_vec(), g).expect("grad shape"))
                .expect("unique names");
        }
        out
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Truncated normal, `std * z` with `z ~ N(0, 1)` resampled until `|z| <= 2`.
pub fn trunc_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub(crate) fn add_conv<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    weight_shape: [usize; 4],
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.weight"), trunc_normal(&weight_shape, INIT_STD, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([weight_shape[0]]))
}

pub(crate) fn add_linear<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    out_features: usize,
    in_features: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.weight"), trunc_normal(&[out_features, in_features], INIT_STD, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([out_features]))
}

pub(crate) fn add_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full([channels], T::one()))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([channels]))
}
