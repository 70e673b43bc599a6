//! Named finite-difference checks grouped by scope, shared by the
//! `gradcheck` command and the test suites.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{checked_indices, grad_check, relative_error, GradCheckOptions, GradCheckReport};
use crate::head::{head_forward, init_head, HeadConfig};
use crate::loss::{feature_smoothing_on_tape, total_loss, total_loss_on_tape, BatchFeatures, LossConfig};
use crate::model::{model_forward, BackboneKind, ModelConfig};
use crate::ops::{Activation, Conv2dSpec};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Single primitive ops.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Multi-op compositions (head, losses, whole model).
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;
/// Closed-form loss gradient against tape backward.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-12;
/// Check points are redrawn until every ReLU input and max-pool gap is at
/// least this far from a kink.
pub const KINK_MARGIN: f64 = 1e-2;
/// ...and until every checked nonzero gradient component is at least this
/// fraction of the largest one in its input. Smaller components are
/// cancellation residue whose relative error measures rounding, not the
/// backward pass.
pub const CONDITION_RATIO: f64 = 1e-3;
const MAX_DRAWS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Head,
    Loss,
    /// Everything above plus the whole model end to end.
    Full,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Head => "head",
            Scope::Loss => "loss",
            Scope::Full => "full",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "head" => Ok(Scope::Head),
            "loss" => Ok(Scope::Loss),
            "full" => Ok(Scope::Full),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?} (expected op, head, loss or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        let (input, index) = self.report.worst.unwrap_or((0, 0));
        format!(
            "{} {:<28} max_rel_err {:.3e} (tol {:.0e}) input {} index {} checked {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_error,
            self.tolerance,
            input,
            index,
            self.report.checked
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub scope: Scope,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn render(&self) -> String {
        let mut s = format!("gradcheck scope={} seed={}\n", self.scope, self.seed);
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let failed = self.failures().count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values at least `0.1` away from zero, for ReLU.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.gen() {
            *v = -*v;
        }
    }
    t
}

/// Shuffled, evenly spaced values: no two elements closer than `0.05`, so
/// max-pooling has no near ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), v).expect("shape")
}

type Draw<'a> = Box<dyn FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'a>;

struct Runner {
    rng: ChaCha8Rng,
    checks: Vec<CheckOutcome>,
}

impl Runner {
    /// Draws inputs (and a random upstream gradient) until the point is well
    /// conditioned, then runs the finite-difference comparison there.
    fn check<F>(&mut self, name: &str, tolerance: f64, cap: Option<usize>, mut draw: Draw<'_>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        for _ in 0..MAX_DRAWS {
            let inputs = draw(&mut self.rng);
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = f(&mut tape, &vars)?;
            let shape = tape.value(out).shape().to_vec();
            let seed = uniform(&mut self.rng, &shape, -1.0, 1.0);
            if tape.kink_margin() < KINK_MARGIN {
                continue;
            }
            tape.backward_with_seeds(vec![(out, seed.clone())])?;
            let conditioned = vars.iter().zip(&inputs).all(|(&v, t)| {
                let g = tape.grad(v).unwrap_or(&[]);
                let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                checked_indices(t.numel(), cap).all(|j| {
                    let x = g.get(j).map_or(0.0, |x| x.abs());
                    x == 0.0 || x >= CONDITION_RATIO * scale
                })
            });
            if !conditioned {
                continue;
            }
            let options = GradCheckOptions { output_seed: Some(seed), max_checks_per_input: cap, ..Default::default() };
            let report = grad_check(f, &inputs, &options)?;
            self.checks.push(CheckOutcome { name: name.to_string(), tolerance, report });
            return Ok(());
        }
        Err(Error::InvalidArgument(format!("{name}: no well-conditioned input found in {MAX_DRAWS} draws")))
    }

    fn ops(&mut self) -> Result<()> {
        let u = uniform;
        self.check(
            "conv2d.padded",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[2, 3, 5, 5], -1.0, 1.0), u(r, &[4, 3, 3, 3], -0.5, 0.5), u(r, &[4], -0.5, 0.5)]),
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 1, 1)),
        )?;
        self.check(
            "conv2d.patchify",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[2, 2, 8, 8], -1.0, 1.0), u(r, &[3, 2, 4, 4], -0.5, 0.5), u(r, &[3], -0.5, 0.5)]),
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(4, 0, 1)),
        )?;
        self.check(
            "conv2d.depthwise",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[2, 3, 5, 5], -1.0, 1.0), u(r, &[3, 1, 7, 7], -0.5, 0.5), u(r, &[3], -0.5, 0.5)]),
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 3, 3)),
        )?;
        self.check(
            "linear",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[4, 6], -1.0, 1.0), u(r, &[5, 6], -0.5, 0.5), u(r, &[5], -0.5, 0.5)]),
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        )?;
        self.check(
            "layer_norm.channels",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[2, 6, 3, 3], -1.0, 1.0), u(r, &[6], 0.5, 1.5), u(r, &[6], -0.5, 0.5)]),
            |t, v| t.layer_norm(v[0], v[1], v[2], 1, 1e-6),
        )?;
        self.check(
            "layer_norm.last_axis",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[2, 8], -1.0, 1.0), u(r, &[8], 0.5, 1.5), u(r, &[8], -0.5, 0.5)]),
            |t, v| t.layer_norm(v[0], v[1], v[2], 1, 1e-6),
        )?;
        for kind in [Activation::Gelu, Activation::Sigmoid] {
            self.check(&kind.to_string(), OP_TOLERANCE, None, Box::new(|r| vec![u(r, &[3, 7], -3.0, 3.0)]), |t, v| {
                Ok(t.activation(v[0], kind))
            })?;
        }
        self.check("relu", OP_TOLERANCE, None, Box::new(|r| vec![off_kink(r, &[3, 7])]), |t, v| {
            Ok(t.activation(v[0], Activation::Relu))
        })?;
        self.check("global_avg_pool", OP_TOLERANCE, None, Box::new(|r| vec![u(r, &[2, 3, 4, 4], -1.0, 1.0)]), |t, v| {
            t.global_avg_pool(v[0])
        })?;
        self.check("global_max_pool", OP_TOLERANCE, None, Box::new(|r| vec![distinct(r, &[2, 3, 4, 4])]), |t, v| {
            t.global_max_pool(v[0])
        })?;
        self.check("max_pool2d", OP_TOLERANCE, None, Box::new(|r| vec![distinct(r, &[2, 3, 4, 4])]), |t, v| {
            t.max_pool2d(v[0], 2)
        })?;
        self.check(
            "concat_channels",
            OP_TOLERANCE,
            None,
            Box::new(|r| vec![u(r, &[4, 3], -1.0, 1.0), u(r, &[4, 5], -1.0, 1.0)]),
            |t, v| t.concat_channels(v[0], v[1]),
        )?;
        let pair: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> = |r| vec![uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[4, 6], -1.0, 1.0)];
        let single: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> = |r| vec![uniform(r, &[4, 6], -1.0, 1.0)];
        self.check("add", OP_TOLERANCE, None, Box::new(pair), |t, v| t.add(v[0], v[1]))?;
        self.check("sub", OP_TOLERANCE, None, Box::new(pair), |t, v| t.sub(v[0], v[1]))?;
        self.check("mul", OP_TOLERANCE, None, Box::new(pair), |t, v| t.mul(v[0], v[1]))?;
        self.check("scale", OP_TOLERANCE, None, Box::new(single), |t, v| Ok(t.scale(v[0], -1.7)))?;
        self.check("dropout.train", OP_TOLERANCE, None, Box::new(single), |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            t.dropout(v[0], 0.3, true, &mut rng)
        })?;
        self.check("segment_mean", OP_TOLERANCE, None, Box::new(single), |t, v| t.segment_mean(v[0], &[1, 0, 1, 2], 3))?;
        self.check("gather_rows", OP_TOLERANCE, None, Box::new(|r| vec![u(r, &[3, 6], -1.0, 1.0)]), |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 1, 1])
        })?;
        self.check("weighted_row_sum", OP_TOLERANCE, None, Box::new(single), |t, v| {
            t.weighted_row_sum(v[0], &[0.5, -1.0, 0.25, 2.0])
        })?;
        self.check("cross_entropy", OP_TOLERANCE, None, Box::new(|r| vec![u(r, &[4, 5], -2.0, 2.0)]), |t, v| {
            t.cross_entropy(v[0], &[0, 4, 2, 2])
        })?;
        Ok(())
    }

    fn head(&mut self) -> Result<()> {
        let config = HeadConfig { hidden: 16, ..HeadConfig::new(8, 3) };
        let params: ParamStore<f64> = init_head(&config, &mut self.rng)?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        // Wider than the init scale so the check is not dominated by tiny values.
        let draw = Box::new(|rng: &mut ChaCha8Rng| {
            let mut inputs = vec![uniform(rng, &[4, 8, 2, 2], -1.0, 1.0)];
            inputs.extend(params.iter().map(|(_, p)| uniform(rng, p.shape(), -0.4, 0.4)));
            inputs
        });
        let labels = [0usize, 2, 0, 1];
        self.check("head.gagm_se_classifier_loss", COMPOSITE_TOLERANCE, Some(24), draw, |t, v| {
            let vars: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let h = head_forward(t, v[0], &vars, &config, true, &mut rng)?;
            total_loss_on_tape(t, h.logits, h.prelogits, &labels, 0.05)
        })
    }

    fn loss(&mut self) -> Result<()> {
        let labels = [0usize, 1, 0, 2, 1, 0];
        self.check("loss.feature_smoothing", COMPOSITE_TOLERANCE, None, Box::new(|r| vec![uniform(r, &[6, 5], -1.0, 1.0)]), |t, v| {
            feature_smoothing_on_tape(t, v[0], &labels)
        })?;
        self.check(
            "loss.total",
            COMPOSITE_TOLERANCE,
            None,
            Box::new(|r| vec![uniform(r, &[6, 3], -2.0, 2.0), uniform(r, &[6, 5], -1.0, 1.0)]),
            |t, v| total_loss_on_tape(t, v[0], v[1], &labels, 0.05),
        )?;

        // Closed-form gradients (centre held fixed) against tape backward
        // through the dynamic centre.
        let lambda = 0.05;
        let logits = uniform(&mut self.rng, &[6, 3], -2.0, 2.0);
        let feats = uniform(&mut self.rng, &[6, 5], -1.0, 1.0);
        let closed = total_loss(&logits, &BatchFeatures::new(&feats, &labels)?, &LossConfig::new(lambda, 3)?)?;
        let mut tape = Tape::new();
        let lv = tape.leaf(logits, true);
        let fv = tape.leaf(feats, true);
        let out = total_loss_on_tape(&mut tape, lv, fv, &labels, lambda)?;
        tape.backward(out)?;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            checked: 0,
        };
        for (i, (analytic, var)) in [(&closed.grad_logits, lv), (&closed.grad_features, fv)].into_iter().enumerate() {
            let taped = tape.grad(var).expect("leaf requires grad");
            for (j, (&a, &b)) in analytic.data().iter().zip(taped).enumerate() {
                let e = relative_error(a, b);
                report.checked += 1;
                if e > report.max_rel_error || report.worst.is_none() {
                    report = GradCheckReport {
                        max_rel_error: e,
                        worst: Some((i, j)),
                        analytic_at_worst: a,
                        numeric_at_worst: b,
                        checked: report.checked,
                    };
                }
            }
        }
        self.checks.push(CheckOutcome { name: "loss.closed_form_vs_tape".into(), tolerance: CLOSED_FORM_TOLERANCE, report });
        Ok(())
    }

    fn model(&mut self) -> Result<()> {
        let backbone = BackboneConfig {
            in_channels: 1,
            stage_depths: [1, 1, 1, 1],
            stage_widths: [4, 4, 8, 8],
            stem_kernel: 4,
            stem_stride: 4,
        };
        let config = ModelConfig {
            head: HeadConfig { hidden: 16, ..HeadConfig::new(backbone.out_channels(), 3) },
            backbone: BackboneKind::ConvNext(backbone),
            image_size: 32,
        };
        config.validate()?;
        let params: ParamStore<f64> = config.init_params(self.rng.gen())?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        // Wider weights than at init so activations are not all near zero.
        let draw = Box::new(|rng: &mut ChaCha8Rng| {
            let mut inputs = vec![uniform(rng, &[4, 1, 32, 32], -1.0, 1.0)];
            for (name, p) in params.iter() {
                let (lo, hi) = if name.ends_with(".gamma") { (0.5, 1.5) } else { (-0.3, 0.3) };
                inputs.push(uniform(rng, p.shape(), lo, hi));
            }
            inputs
        });
        let labels = [1usize, 0, 2, 1];
        self.check("model.end_to_end", COMPOSITE_TOLERANCE, Some(4), draw, |t, v| {
            let vars: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let out = model_forward(t, &vars, v[0], &config, true, &mut rng)?;
            total_loss_on_tape(t, out.logits(), out.prelogits(), &labels, 0.05)
        })
    }
}

/// Runs every check in `scope` with inputs drawn from `seed`.
pub fn run_suite(scope: Scope, seed: u64) -> Result<SuiteReport> {
    let mut runner = Runner { rng: ChaCha8Rng::seed_from_u64(seed), checks: Vec::new() };
    match scope {
        Scope::Op => runner.ops()?,
        Scope::Head => runner.head()?,
        Scope::Loss => runner.loss()?,
        Scope::Full => {
            runner.ops()?;
            runner.head()?;
            runner.loss()?;
            runner.model()?;
        }
    }
    Ok(SuiteReport { scope, seed, checks: runner.checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in [Scope::Op, Scope::Head, Scope::Loss, Scope::Full] {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("all".parse::<Scope>().is_err());
    }

    #[test]
    fn loss_scope_passes() {
        let r = run_suite(Scope::Loss, 0).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.checks.len(), 3);
    }
}
