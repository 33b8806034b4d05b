use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Whether batch-dependent layers use batch statistics (and build the tape)
/// or their running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormCfg {
    pub eps: f64,
    /// Weight kept on the old running estimate at each update.
    pub momentum: f64,
}

impl Default for BatchNormCfg {
    fn default() -> Self {
        BatchNormCfg { eps: 1e-5, momentum: 0.99 }
    }
}

/// Exponential moving averages of per-channel batch mean and (biased)
/// variance.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

/// Per-channel batch normalization over (n, h, w).
///
/// Train mode normalizes with the batch statistics and folds them into
/// `running`; infer mode normalizes with `running` and leaves it untouched.
pub fn batchnorm2d<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: RunningStats<'_, T>,
    mode: Mode,
    cfg: BatchNormCfg,
) -> Result<Var> {
    let xv = tape.value(x);
    let s = xv.shape();
    let c = s.c;
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(shape_err!(
            "batchnorm over {c} channels given gamma {} / beta {}",
            tape.value(gamma).shape(),
            tape.value(beta).shape()
        ));
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(shape_err!("running stats sized {} for {c} channels", running.mean.len()));
    }
    let m = s.n * s.plane();
    if m == 0 {
        return Err(shape_err!("batchnorm input {s} has no elements per channel"));
    }
    let plane = s.plane();
    let xd = xv.data();
    let channel = move |ch: usize| (0..s.n).flat_map(move |n| {
        let base = (n * c + ch) * plane;
        base..base + plane
    });

    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                // accumulate in f64 so both precisions see the same statistics quality
                let mu = channel(ch).map(|i| xd[i].as_f64()).sum::<f64>() / m as f64;
                let var = channel(ch).map(|i| (xd[i].as_f64() - mu).powi(2)).sum::<f64>() / m as f64;
                mean[ch] = T::of(mu);
                inv_std[ch] = T::of(1.0 / (var + cfg.eps).sqrt());
                let keep = T::of(cfg.momentum);
                let take = T::of(1.0 - cfg.momentum);
                running.mean[ch] = keep * running.mean[ch] + take * T::of(mu);
                running.var[ch] = keep * running.var[ch] + take * T::of(var);
            }
        }
        Mode::Infer => {
            for ch in 0..c {
                mean[ch] = running.mean[ch];
                inv_std[ch] = T::of(1.0 / (running.var[ch].as_f64() + cfg.eps).sqrt());
            }
        }
    }

    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        for i in channel(ch) {
            let h = (xd[i] - mean[ch]) * inv_std[ch];
            xhat.data_mut()[i] = h;
            out.data_mut()[i] = g[ch] * h + b[ch];
        }
    }

    Ok(tape.push(OpKind::BatchNorm2d, out, &[x, gamma, beta], move |dy: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>| {
        let gamma = ins[1].data();
        let dyd = dy.data();
        let hd = xhat.data();
        let mut dx = Tensor::zeros(s);
        let mut dgamma = Tensor::zeros(ins[1].shape());
        let mut dbeta = Tensor::zeros(ins[2].shape());
        let mf = T::of(m as f64);
        for ch in 0..c {
            let sum_dy: T = channel(ch).map(|i| dyd[i]).sum();
            let sum_dy_h: T = channel(ch).map(|i| dyd[i] * hd[i]).sum();
            dgamma.data_mut()[ch] = sum_dy_h;
            dbeta.data_mut()[ch] = sum_dy;
            let scale = gamma[ch] * inv_std[ch];
            match mode {
                Mode::Train => {
                    for i in channel(ch) {
                        dx.data_mut()[i] = scale / mf * (mf * dyd[i] - sum_dy - hd[i] * sum_dy_h);
                    }
                }
                Mode::Infer => {
                    for i in channel(ch) {
                        dx.data_mut()[i] = scale * dyd[i];
                    }
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }))
}
