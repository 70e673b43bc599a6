//! Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, p) in params.iter() {
                s.insert(name, Tensor::zeros(p.shape().to_vec())).expect("unique names");
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter. A non-finite gradient
/// aborts before anything is modified.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("gradient of {name} is {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {name} at element {i} is {}", Element::to_f64(g.data()[i])),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = T::from_f64(config.beta1 * Element::to_f64(*mi) + (1.0 - config.beta1) * Element::to_f64(gi));
        }
        let m = state.m.get(name)?.data();
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            let gi = Element::to_f64(gi);
            *vi = T::from_f64(config.beta2 * Element::to_f64(*vi) + (1.0 - config.beta2) * gi * gi);
        }
        let v = state.v.get(name)?.data();
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = Element::to_f64(mi) / bc1;
            let v_hat = Element::to_f64(vi) / bc2;
            *pi = T::from_f64(Element::to_f64(*pi) - config.lr * m_hat / (v_hat.sqrt() + config.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &single(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[0.7]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.01] {
            let mut p = single(1.0);
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
            adam_step(&mut p, &single(g), &mut st, &cfg).unwrap();
            let moved = 1.0 - p.get("p").unwrap().data()[0];
            assert!((moved - 0.1 * f64::signum(g)).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn minimises_square() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        for _ in 0..200 {
            let x = p.get("p").unwrap().data()[0];
            adam_step(&mut p, &single(2.0 * x), &mut st, &cfg).unwrap();
        }
        assert!(p.get("p").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &single(f64::NAN), &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(st.t, 0);
        assert_eq!(p.get("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
