//! Central finite-difference verification of tape gradients (f64 only).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upstream gradient for non-scalar outputs; the checked scalar is `sum(seed * output)`.
    pub output_seed: Option<Tensor<f64>>,
    /// Cap on perturbed elements per input (evenly strided); `None` checks all.
    pub max_checks_per_input: Option<usize>,
    /// Inputs to leave unperturbed (still differentiated through).
    pub skip_inputs: Vec<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, output_seed: None, max_checks_per_input: None, skip_inputs: Vec::new() }
    }
}

impl GradCheckOptions {
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat element)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Element indices perturbed for an input of `n` elements: all of them, or
/// an even stride when `cap` is smaller.
pub fn checked_indices(n: usize, cap: Option<usize>) -> std::iter::StepBy<std::ops::Range<usize>> {
    let stride = match cap {
        Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
        _ => 1,
    };
    (0..n).step_by(stride)
}

/// Compares the tape's analytic gradient of `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input,
/// where `f` is the output projected onto the seed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&options.eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be in [1e-7, 1e-4], got {}", options.eps)));
    }
    if let Some(bad) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite { context: format!("grad_check input {bad}") });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let seed = match &options.output_seed {
        Some(s) => s.clone(),
        None if tape.value(out).numel() == 1 => Tensor::full(tape.value(out).shape().to_vec(), 1.0),
        None => {
            return Err(Error::InvalidArgument(format!(
                "grad_check: output has shape {:?}; provide an output seed",
                tape.value(out).shape()
            )))
        }
    };
    if seed.shape() != tape.value(out).shape() {
        return Err(Error::shape("grad_check", format!("seed {:?} vs output {:?}", seed.shape(), tape.value(out).shape())));
    }
    tape.backward_with_seeds(vec![(out, seed.clone())])?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let evaluate = |perturbed: &[Tensor<f64>]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data().to_vec())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if options.skip_inputs.contains(&i) {
            continue;
        }
        for j in checked_indices(input.numel(), options.max_checks_per_input) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + options.eps;
            let plus = evaluate(&work)?;
            work[i].data_mut()[j] = orig - options.eps;
            let minus = evaluate(&work)?;
            work[i].data_mut()[j] = orig;
            // Differencing per output before projecting keeps outputs that do
            // not depend on this element exactly out of the sum.
            let delta: f64 = plus.iter().zip(&minus).zip(seed.data()).map(|((p, m), s)| s * (p - m)).sum();
            let numeric = delta / (2.0 * options.eps);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5])];
        let seed = random(&mut rng, &[3, 5]);
        let opts = GradCheckOptions { output_seed: Some(seed), ..Default::default() };
        let r = grad_check(|t, v| t.linear(v[0], v[1], Some(v[2])), &inputs, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        assert_eq!(r.checked, 12 + 20 + 5);
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..20)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen() { v } else { -v }
            })
            .collect();
        let inputs = [Tensor::new([4, 5], x).unwrap()];
        let seed = random(&mut rng, &[4, 5]);
        let opts = GradCheckOptions { output_seed: Some(seed), ..Default::default() };
        let r = grad_check(|t, v| Ok(t.activation(v[0], Activation::Relu)), &inputs, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let inputs = [Tensor::full([2, 2], 0.3)];
        let r = grad_check(
            |t, _| Ok(t.leaf(Tensor::scalar(4.0), false)),
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn non_scalar_output_needs_seed() {
        let inputs = [Tensor::full([2, 2], 0.3)];
        let err = grad_check(|t, v| Ok(t.scale(v[0], 2.0)), &inputs, &GradCheckOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn eps_range_is_enforced() {
        let inputs = [Tensor::full([1], 0.3)];
        assert!(grad_check(|t, v| Ok(t.scale(v[0], 2.0)), &inputs, &GradCheckOptions::with_eps(1e-3)).is_err());
    }
}
