//! Central finite-difference checking of tape gradients, in `f64`.
//!
//! The numeric side only ever evaluates forward passes on a no-grad tape, so
//! it shares nothing with the backward rules it checks.

mod suite;

pub use suite::{run_suite, SuiteOptions, SuiteReport, SuiteRow, END_TO_END, PRIMITIVES};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    /// Perturbation applied as ±step to one element at a time.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-5, floor: 1e-7, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub inputs: Vec<InputCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar produced by `build` against
/// central differences, for every input in `inputs`.
///
/// `build` must be a pure function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, cfg: FdConfig) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Usage("gradient check needs a scalar objective".into()));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck::default();
    for i in 0..inputs.len() {
        let len = inputs[i].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut check = InputCheck { checked: coords.len(), ..Default::default() };
        for &j in &coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, cfg.floor);
            if err > check.max_rel_err || check.worst.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst = Some((j, a, numeric));
            }
        }
        report.inputs.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-7), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-7) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-7) - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_backward_rule() {
        let x = Tensor::from_fn([1, 1, 2, 2], |i| i as f64 + 1.0);
        let good = check_gradients(&[x.clone()], |t, v| Ok(ops::sum(t, v[0])), FdConfig::default()).unwrap();
        assert!(good.max_rel_err() < 1e-8);
        let bad = check_gradients(
            &[x],
            |t, v| {
                let value = t.value(v[0]).clone();
                let doubled = t.push(crate::autodiff::OpKind::Custom("broken"), value, &[v[0]], |g: &Tensor<f64>, _: &[&Tensor<f64>], _: &Tensor<f64>| {
                    vec![Some(g.map(|x| 2.0 * x))]
                });
                Ok(ops::sum(t, doubled))
            },
            FdConfig::default(),
        )
        .unwrap();
        assert!(bad.max_rel_err() > 0.4);
    }
}
