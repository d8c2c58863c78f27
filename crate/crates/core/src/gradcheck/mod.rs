//! Central finite-difference checks of tape gradients, in double precision.
//!
//! [`check_fn`] compares the gradient of a scalar function of several input
//! tensors against `(f(x + h e_i) - f(x - h e_i)) / 2h` elementwise. The
//! relative error of one element is `|a - n| / max(|a|, |n|, floor)`.
//!
//! The suites in [`suite`] cover every differentiable operator, the network
//! modules, and the whole model.

pub mod suite;

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many elements of each input (sampled); `None` checks all.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    /// Also difference with half the step and skip elements where the two
    /// estimates disagree, i.e. where the window straddles a kink of the
    /// function. Decided from function values only.
    pub kink_guard: bool,
    /// Fail a check that ends with fewer compared elements than this.
    pub min_checked: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
            max_per_input: None,
            seed: 0,
            kink_guard: false,
            min_checked: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Worst {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements left out by the kink guard.
    pub skipped: usize,
    pub min_checked: usize,
    pub tolerance: f64,
    pub worst: Option<Worst>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.max_rel_error.is_finite() && self.checked >= self.min_checked
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A named differentiable input to [`check_fn`].
pub struct Input {
    pub name: String,
    pub value: Tensor<f64>,
}

impl Input {
    pub fn new(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

pub(crate) fn sample_indices(n: usize, max: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// One scalar element of one input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
}

/// Check the gradient of `f` with respect to every input (or a sample of
/// each input's elements, see [`GradCheckOptions::max_per_input`]).
pub fn check_fn<F>(name: &str, inputs: &[Input], f: F, opts: &GradCheckOptions) -> Result<CheckOutcome>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut rng = Rng::new(opts.seed);
    let probes = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, i)| {
            sample_indices(i.value.numel(), opts.max_per_input, &mut rng)
                .into_iter()
                .map(move |index| Probe { input: k, index })
        })
        .collect();
    let mut out = check_probes(inputs, vec![(name.to_string(), probes)], f, opts)?;
    Ok(out.remove(0))
}

/// Check named groups of probes against one analytic backward pass; returns
/// one outcome per group.
pub fn check_probes<F>(
    inputs: &[Input],
    groups: Vec<(String, Vec<Probe>)>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<Vec<CheckOutcome>>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|i| tape.leaf(i.value.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(vars);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut outcomes = Vec::with_capacity(groups.len());
    for (name, probes) in groups {
        let mut outcome = CheckOutcome {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
            min_checked: opts.min_checked,
            tolerance: opts.tolerance,
            worst: None,
        };
        for Probe { input: k, index: idx } in probes {
            let mut central = |h: f64| -> Result<f64> {
                let orig = values[k].data()[idx];
                values[k].data_mut()[idx] = orig + h;
                let up = eval(&values)?;
                values[k].data_mut()[idx] = orig - h;
                let down = eval(&values)?;
                values[k].data_mut()[idx] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            if opts.kink_guard {
                let half = central(opts.step / 2.0)?;
                if relative_error(half, numeric, opts.floor) >= opts.tolerance {
                    outcome.skipped += 1;
                    continue;
                }
            }
            let a = analytic[k].data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            outcome.checked += 1;
            if !(err <= outcome.max_rel_error) {
                outcome.max_rel_error = err;
                outcome.worst = Some(Worst {
                    input: inputs[k].name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// `sum(weights ⊙ y)` with fixed pseudo-random weights in `[-1, 1)`, a scalar
/// loss whose gradient exercises every output element differently.
pub fn project(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = Rng::new(seed ^ 0x5EED_F00D);
    let w = tape.constant(Tensor::from_fn(y.shape(), |_| rng.uniform_in(-1.0, 1.0)));
    Ok(tape.sum(&tape.mul(y, &w)?))
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(-scale, scale))
}

/// Random tensor whose entries keep at least `margin` away from zero, for
/// inputs of kinked functions.
pub fn random_away_from_zero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.uniform_in(margin, 1.0);
        if rng.bernoulli(0.5) {
            v
        } else {
            -v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_subgradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let g = tape.backward(&tape.sum(&tape.relu(&x))).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Input::new("x", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let out = check_fn(
            "doubled_square",
            &[x],
            |tape, v| {
                let y = v[0].value().map(|a| a * a);
                let xv = v[0].shared();
                // d(x²)/dx is 2x; report 4x instead
                let sq = tape.custom("bad_square", y, &[&v[0]], move |g, _| {
                    Ok(vec![Some(g.zip_map(&xv, |g, x| g * 4.0 * x)?)])
                });
                Ok(tape.sum(&sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!out.passed());
        assert!((out.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kink_guard_skips_windows_across_a_kink() {
        let x = Input::new("x", Tensor::new([2], vec![3e-7, 0.5]).unwrap());
        let f = |tape: &Tape<f64>, v: &[Var<f64>]| Ok(tape.sum(&tape.relu(&v[0])));
        let plain = check_fn("relu", std::slice::from_ref(&x), f, &GradCheckOptions::default()).unwrap();
        assert!(!plain.passed(), "central difference across the kink is off by half the slope");
        let opts = GradCheckOptions {
            kink_guard: true,
            ..Default::default()
        };
        let guarded = check_fn("relu", &[x], f, &opts).unwrap();
        assert_eq!((guarded.checked, guarded.skipped), (1, 1));
        assert!(guarded.passed());
        let strict = GradCheckOptions { min_checked: 2, ..opts };
        let x = Input::new("x", Tensor::new([2], vec![3e-7, 0.5]).unwrap());
        assert!(!check_fn("relu", &[x], f, &strict).unwrap().passed());
    }
}
