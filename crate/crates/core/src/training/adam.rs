use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "adam needs lr >= 0, betas in [0, 1), eps > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One Adam update of `p` in place. `t` is the step number after
/// incrementing, so the first call uses `t = 1`.
pub fn adam_update<T: Float>(cfg: &AdamConfig, t: u64, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::of(cfg.lr), T::of(cfg.eps));
    let (c1, c2) = (T::of(c1), T::of(c2));
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Moments for every trainable parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let moments = store
            .iter()
            .map(|(_, p)| p.kind.trainable().then(|| (vec![T::zero(); p.value.numel()], vec![T::zero(); p.value.numel()])))
            .collect();
        Ok(AdamState { cfg, t: 0, moments })
    }

    /// Every trainable parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if store.len() != self.moments.len() {
            return Err(Error::Usage("optimizer state belongs to a different parameter set".into()));
        }
        let ids: Vec<_> = store.trainable().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in &ids {
            match grads.get(*id) {
                None => return Err(Error::Usage(format!("no gradient for parameter {name:?}"))),
                Some(g) if g.shape() != store.value(*id).shape() => {
                    return Err(shape_err!("gradient for {name:?} has shape {}", g.shape()))
                }
                Some(_) => {}
            }
        }
        self.t += 1;
        for (id, _) in ids {
            let g = grads.get(id).expect("checked above");
            let (m, v) = self.moments[id.index()].as_mut().expect("trainable parameter has moments");
            adam_update(&self.cfg, self.t, store.value_mut(id).data_mut(), g.data(), m, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_about_lr() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&cfg, 1, &mut p, &[1.0], &mut m, &mut v);
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([0.7f64], [0.0], [0.0]);
        for t in 1..=5 {
            adam_update(&cfg, t, &mut p, &[0.0], &mut m, &mut v);
        }
        assert_eq!(p[0], 0.7);
    }
}
