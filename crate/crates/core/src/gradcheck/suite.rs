//! The fixed list of finite-difference checks run by `nerveseg gradcheck`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_gradients, relative_error, FdConfig};
use crate::autodiff::{OpKind, Tape, Var};
use crate::data::{generate_sample, SynthCfg};
use crate::error::{Error, Result};
use crate::models::{Arch, ModelGraph, ModelOptions};
use crate::ops::{self, BatchNormCfg, Mode, Padding, RunningStats};
use crate::params::{ParamId, ParamKind};
use crate::tensor::{Shape, Tensor};
use crate::training::{dice_loss, DiceLossCfg};

pub const PRIMITIVES: &[&str] = &[
    "conv2d_3x3",
    "conv2d_3x3_valid",
    "conv2d_1x1",
    "maxpool2x2",
    "max_unpool2x2",
    "upsample_nearest2x",
    "concat_channels",
    "batchnorm2d_train",
    "batchnorm2d_infer",
    "relu",
    "sigmoid",
    "add_scaled",
    "add_scaled_var",
    "weighted_sum",
    "dice_loss",
];

pub const END_TO_END: &str = "resunet_16x16";

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Each primitive is checked on this many derived seeds.
    pub seeds: usize,
    pub primitive_tol: f64,
    pub end_to_end_tol: f64,
    /// Coordinates sampled for the end-to-end check.
    pub end_to_end_coords: usize,
    pub fd: FdConfig,
    /// Name of a check whose backward is deliberately scaled by 1.5.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            seeds: 5,
            primitive_tol: 1e-4,
            end_to_end_tol: 1e-3,
            end_to_end_coords: 160,
            fd: FdConfig::default(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(SuiteRow::passed)
    }

    pub fn row(&self, name: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{:<20} seeds={} coords={:<5} max_rel_err={:.3e} tol={:.0e} {}",
                r.name,
                r.seeds,
                r.checked,
                r.max_rel_err,
                r.tol,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values at least 0.1 away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values spaced by at least 0.01.
fn distinct(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let shape = shape.into();
    let n = shape.numel();
    let perm = sample(rng, n, n).into_vec();
    Tensor::from_fn(shape, |i| perm[i] as f64 * 0.01 - n as f64 * 0.005)
}

/// Identity forward whose backward is scaled by 1.5.
fn corrupted(tape: &mut Tape<f64>, x: Var) -> Var {
    let value = tape.value(x).clone();
    tape.push(OpKind::Custom("corrupted"), value, &[x], |g: &Tensor<f64>, _: &[&Tensor<f64>], _: &Tensor<f64>| {
        vec![Some(g.map(|v| 1.5 * v))]
    })
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Inputs and the op under test; the objective is a random weighted sum of
/// the op's output unless the op is already scalar.
fn primitive(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    let bn = BatchNormCfg { eps: 1e-5, momentum: 0.9 };
    match name {
        "conv2d_3x3" => (
            vec![normal(rng, [2, 3, 5, 4]), normal(rng, [4, 3, 3, 3]), normal(rng, Shape::vector(4))],
            Box::new(|t, v| ops::conv2d(t, v[0], v[1], Some(v[2]), Padding::Same)),
        ),
        "conv2d_3x3_valid" => (
            vec![normal(rng, [1, 2, 5, 6]), normal(rng, [3, 2, 3, 3]), normal(rng, Shape::vector(3))],
            Box::new(|t, v| ops::conv2d(t, v[0], v[1], Some(v[2]), Padding::None)),
        ),
        "conv2d_1x1" => (
            vec![normal(rng, [2, 3, 4, 4]), normal(rng, [2, 3, 1, 1]), normal(rng, Shape::vector(2))],
            Box::new(|t, v| ops::conv2d(t, v[0], v[1], Some(v[2]), Padding::Same)),
        ),
        "maxpool2x2" => (vec![distinct(rng, [2, 2, 4, 6])], Box::new(|t, v| Ok(ops::maxpool2x2(t, v[0])?.0))),
        "max_unpool2x2" => {
            let source = distinct(rng, [2, 2, 4, 4]);
            (
                vec![normal(rng, [2, 2, 2, 2])],
                Box::new(move |t, v| {
                    let s = t.constant(source.clone());
                    let (_, idx) = ops::maxpool2x2(t, s)?;
                    ops::max_unpool2x2(t, v[0], &idx)
                }),
            )
        }
        "upsample_nearest2x" => (vec![normal(rng, [2, 3, 3, 2])], Box::new(|t, v| Ok(ops::upsample_nearest2x(t, v[0])))),
        "concat_channels" => (
            vec![normal(rng, [2, 2, 3, 3]), normal(rng, [2, 3, 3, 3])],
            Box::new(|t, v| ops::concat_channels(t, v[0], v[1])),
        ),
        "batchnorm2d_train" => (
            vec![normal(rng, [3, 2, 3, 2]), normal(rng, Shape::vector(2)), normal(rng, Shape::vector(2))],
            Box::new(move |t, v| {
                let (mut m, mut s) = (vec![0.0; 2], vec![1.0; 2]);
                ops::batchnorm2d(t, v[0], v[1], v[2], RunningStats { mean: &mut m, var: &mut s }, Mode::Train, bn)
            }),
        ),
        "batchnorm2d_infer" => {
            let mean: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
            (
                vec![normal(rng, [2, 2, 3, 3]), normal(rng, Shape::vector(2)), normal(rng, Shape::vector(2))],
                Box::new(move |t, v| {
                    let (mut m, mut s) = (mean.clone(), var.clone());
                    ops::batchnorm2d(t, v[0], v[1], v[2], RunningStats { mean: &mut m, var: &mut s }, Mode::Infer, bn)
                }),
            )
        }
        "relu" => (vec![off_zero(rng, [2, 3, 4, 4])], Box::new(|t, v| Ok(ops::relu(t, v[0])))),
        "sigmoid" => (vec![normal(rng, [2, 3, 4, 4]).map(|x| 3.0 * x)], Box::new(|t, v| Ok(ops::sigmoid(t, v[0])))),
        "add_scaled" => {
            let scale: f64 = rng.gen_range(-2.0..2.0);
            (
                vec![normal(rng, [2, 2, 3, 3]), normal(rng, [2, 2, 3, 3])],
                Box::new(move |t, v| ops::add_scaled(t, v[0], v[1], scale)),
            )
        }
        "add_scaled_var" => (
            vec![normal(rng, [2, 2, 3, 3]), normal(rng, [2, 2, 3, 3]), normal(rng, Shape::scalar())],
            Box::new(|t, v| ops::add_scaled_var(t, v[0], v[1], v[2])),
        ),
        "weighted_sum" => {
            let w = normal(rng, [2, 2, 3, 3]);
            (vec![normal(rng, [2, 2, 3, 3])], Box::new(move |t, v| ops::weighted_sum(t, v[0], w.clone())))
        }
        "dice_loss" => {
            let x = Tensor::from_fn([2, 1, 8, 8], |_| rng.gen_range(0.05..0.95));
            let y = Tensor::from_fn([2, 1, 8, 8], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            (vec![x], Box::new(move |t, v| dice_loss(t, v[0], &y, DiceLossCfg::default())))
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a << 32 | b);
    rng.gen()
}

fn check_primitive(name: &'static str, opts: &SuiteOptions, case: u64) -> Result<SuiteRow> {
    let mut row = SuiteRow { name: name.to_string(), seeds: opts.seeds, checked: 0, max_rel_err: 0.0, tol: opts.primitive_tol };
    let corrupt = opts.corrupt.as_deref() == Some(name);
    for s in 0..opts.seeds {
        let seed = derive_seed(opts.seed, case, s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = primitive(name, &mut rng);
        let probe = {
            let mut t = Tape::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let out = build(&mut t, &vars)?;
            t.value(out).shape()
        };
        let weights = (probe.numel() != 1).then(|| normal(&mut rng, probe));
        let objective = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let mut out = build(t, v)?;
            if corrupt {
                out = corrupted(t, out);
            }
            match &weights {
                Some(w) => ops::weighted_sum(t, out, w.clone()),
                None => Ok(out),
            }
        };
        let report = check_gradients(&inputs, objective, FdConfig { seed, ..opts.fd })?;
        row.checked += report.inputs.iter().map(|c| c.checked).sum::<usize>();
        row.max_rel_err = row.max_rel_err.max(report.max_rel_err());
    }
    Ok(row)
}

/// Dice loss of a freshly built 16×16 improved U-NET on one synthetic
/// sample, differentiated with respect to the input and sampled parameters.
fn check_end_to_end(opts: &SuiteOptions) -> Result<SuiteRow> {
    let seed = derive_seed(opts.seed, u64::MAX >> 32, 0);
    let mut model = ModelGraph::<f64>::build(Arch::Resunet, ModelOptions { seed, ..ModelOptions::with_base_filters(2) })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fresh biases, betas and gammas sit exactly on ReLU kinks wherever a
    // batch-norm channel sees a single value (the 1×1 bottleneck).
    let ids: Vec<ParamId> = model.params().trainable().filter(|(_, p)| p.kind != ParamKind::Weight).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let synth = SynthCfg { h: 16, w: 16, p_empty: 0.0, axis_min: 0.2, axis_max: 0.35, ..Default::default() };
    let synthetic = generate_sample(&synth, &mut rng, "gradcheck");
    let x = Tensor::from_vec([1, 1, 16, 16], synthetic.image.data.iter().map(|&v| v as f64).collect())?;
    let y = Tensor::from_vec([1, 1, 16, 16], synthetic.mask.data.iter().map(|&v| v as f64).collect())?;
    let corrupt = opts.corrupt.as_deref() == Some(END_TO_END);

    let loss = |model: &ModelGraph<f64>, x: &Tensor<f64>, with_grad: bool| -> Result<(f64, Option<(Tensor<f64>, ModelGrads)>)> {
        let mut model = model.clone();
        let mut tape = if with_grad { Tape::new() } else { Tape::no_grad() };
        let xv = tape.leaf(x.clone(), with_grad);
        let (mut out, bindings) = model.forward_on_tape(&mut tape, xv, Mode::Train)?;
        if corrupt {
            out = corrupted(&mut tape, out);
        }
        let l = dice_loss(&mut tape, out, &y, DiceLossCfg::default())?;
        let value = tape.value(l).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        tape.backward(l)?;
        let gx = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let grads = bindings.gradients(&mut tape);
        let per_param = model
            .params()
            .trainable()
            .map(|(id, p)| (id, grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()))))
            .collect();
        Ok((value, Some((gx, per_param))))
    };

    let (_, grads) = loss(&model, &x, true)?;
    let (gx, gparams) = grads.expect("gradients requested");

    // coordinates: (None, i) is input pixel i, (Some(id), i) a parameter element
    let mut coords: Vec<(Option<ParamId>, usize)> = Vec::new();
    let pixel_budget = opts.end_to_end_coords / 4;
    for i in sample(&mut rng, x.numel(), pixel_budget.min(x.numel())).into_vec() {
        coords.push((None, i));
    }
    let total: usize = gparams.iter().map(|(_, g)| g.numel()).sum();
    let wanted = (opts.end_to_end_coords - pixel_budget).min(total);
    let mut flat = sample(&mut rng, total, wanted).into_vec();
    flat.sort_unstable();
    let mut offset = 0;
    let mut it = flat.into_iter().peekable();
    for (id, g) in &gparams {
        while let Some(&j) = it.peek() {
            if j >= offset + g.numel() {
                break;
            }
            coords.push((Some(*id), j - offset));
            it.next();
        }
        offset += g.numel();
    }

    let h = opts.fd.step;
    let mut max_err: f64 = 0.0;
    for &(target, i) in &coords {
        let (analytic, plus, minus) = match target {
            None => {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (gx.data()[i], loss(&model, &xp, false)?.0, loss(&model, &xm, false)?.0)
            }
            Some(id) => {
                let analytic = gparams.iter().find(|(p, _)| *p == id).expect("sampled id").1.data()[i];
                let mut mp = model.clone();
                mp.params_mut().value_mut(id).data_mut()[i] += h;
                let mut mm = model.clone();
                mm.params_mut().value_mut(id).data_mut()[i] -= h;
                (analytic, loss(&mp, &x, false)?.0, loss(&mm, &x, false)?.0)
            }
        };
        let numeric = (plus - minus) / (2.0 * h);
        let e = relative_error(analytic, numeric, opts.fd.floor);
        max_err = max_err.max(e);
    }
    Ok(SuiteRow { name: END_TO_END.into(), seeds: 1, checked: coords.len(), max_rel_err: max_err, tol: opts.end_to_end_tol })
}

type ModelGrads = Vec<(ParamId, Tensor<f64>)>;

/// Runs every primitive check and the end-to-end check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.seeds == 0 {
        return Err(Error::Usage("gradient check needs at least one seed".into()));
    }
    if let Some(name) = &opts.corrupt {
        if !PRIMITIVES.contains(&name.as_str()) && name != END_TO_END {
            return Err(Error::Usage(format!("no check named {name:?}")));
        }
    }
    let mut report = SuiteReport::default();
    for (case, name) in PRIMITIVES.iter().enumerate() {
        report.rows.push(check_primitive(name, opts, case as u64)?);
    }
    report.rows.push(check_end_to_end(opts)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupting_one_check_fails_only_that_row() {
        let opts = SuiteOptions { seeds: 1, end_to_end_coords: 8, corrupt: Some("relu".into()), ..Default::default() };
        let report = run_suite(&opts).unwrap();
        assert!(!report.passed());
        for r in &report.rows {
            assert_eq!(r.passed(), r.name != "relu", "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&SuiteOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.rows.len(), PRIMITIVES.len() + 1);
    }

    #[test]
    fn unknown_corruption_target() {
        let opts = SuiteOptions { corrupt: Some("nope".into()), ..Default::default() };
        assert!(matches!(run_suite(&opts), Err(Error::Usage(_))));
    }
}
