use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::dice::{dice_coefficient, dice_loss, DiceLossCfg};
use crate::autodiff::Tape;
use crate::data::{make_batches, sequential_batches, Mask, Sample};
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::ops::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dice: DiceLossCfg,
    /// Shuffle seed; epoch `e` shuffles with `seed + e`.
    pub seed: u64,
    pub threshold: f64,
    /// Fill the `seconds` column. Off by default so reports are reproducible.
    pub record_time: bool,
    /// After each epoch, reset BN running statistics to the average batch
    /// statistics of one in-order pass over the training set.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            dice: DiceLossCfg::default(),
            seed: 0,
            threshold: 0.5,
            record_time: false,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        self.adam.validate()?;
        self.dice.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_dice,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let secs = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
            out.push_str(&format!("{},{:.8},{:.8},{secs}\n", r.epoch, r.train_loss, r.val_dice));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// One pass over `samples`; returns the sample-weighted mean batch loss.
pub fn train_epoch(
    model: &mut ModelGraph<f32>,
    samples: &[Sample],
    opt: &mut AdamState<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let batches = make_batches(samples, cfg.batch_size, seed)?;
    let mut total = 0.0;
    for batch in &batches {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let (y, bindings) = model.forward_on_tape(&mut tape, x, Mode::Train)?;
        let loss = dice_loss(&mut tape, y, &batch.masks, cfg.dice)?;
        total += tape.value(loss).data()[0] as f64 * batch.len() as f64;
        tape.backward(loss)?;
        let grads = bindings.gradients(&mut tape);
        opt.step(model.params_mut(), &grads)?;
    }
    Ok(total / samples.len() as f64)
}

/// Thresholded infer-mode predictions, in input order.
pub fn predict_masks(model: &ModelGraph<f32>, samples: &[Sample], threshold: f64, batch_size: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in sequential_batches(samples, batch_size.max(1))? {
        let probs = model.infer(&batch.images)?;
        let s = probs.shape();
        for i in 0..s.n {
            out.push(Mask::from_probabilities(s.h, s.w, probs.sample(i), threshold as f32)?);
        }
    }
    Ok(out)
}

/// Mean per-sample Dice coefficient.
pub fn evaluate(model: &ModelGraph<f32>, samples: &[Sample], threshold: f64, batch_size: usize) -> Result<f64> {
    let preds = predict_masks(model, samples, threshold, batch_size)?;
    let mut sum = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        sum += dice_coefficient(p, &s.mask)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Trains for `cfg.epochs`, evaluating on `val` after each epoch.
/// `on_epoch` sees each row as it is produced.
pub fn fit(
    model: &mut ModelGraph<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Usage("empty validation set".into()));
    }
    let mut opt = AdamState::new(cfg.adam, model.params())?;
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let train_loss = train_epoch(model, train, &mut opt, cfg, cfg.seed.wrapping_add(epoch as u64))?;
        if cfg.recalibrate_bn {
            let batches = sequential_batches(train, cfg.batch_size)?;
            model.recalibrate_bn(batches.iter().map(|b| &b.images))?;
        }
        let val_dice = evaluate(model, val, cfg.threshold, cfg.batch_size)?;
        let seconds = cfg.record_time.then(|| start.elapsed().as_secs_f64());
        let row = EpochRow { epoch, train_loss, val_dice, seconds };
        on_epoch(&row);
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthCfg};
    use crate::models::{Arch, ModelOptions};

    fn tiny() -> (ModelGraph<f32>, Vec<Sample>) {
        let model = ModelGraph::build(Arch::Resunet, ModelOptions::with_base_filters(2)).unwrap();
        let data = generate_dataset(&SynthCfg { h: 16, w: 16, seed: 1, ..Default::default() }, 6).unwrap();
        (model, data)
    }

    #[test]
    fn epoch_is_deterministic() {
        let cfg = TrainConfig { batch_size: 4, ..Default::default() };
        let run = || {
            let (mut m, d) = tiny();
            let mut opt = AdamState::new(cfg.adam, m.params()).unwrap();
            let loss = train_epoch(&mut m, &d, &mut opt, &cfg, 3).unwrap();
            (loss, m.params().clone())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(pa, pb);
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn zero_lr_keeps_trainables() {
        let cfg = TrainConfig { batch_size: 3, adam: AdamConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
        let (mut m, d) = tiny();
        let before = m.params().clone();
        let mut opt = AdamState::new(cfg.adam, m.params()).unwrap();
        train_epoch(&mut m, &d, &mut opt, &cfg, 0).unwrap();
        for ((_, a), (_, b)) in before.trainable().zip(m.params().trainable()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn csv_layout() {
        let r = TrainReport {
            rows: vec![EpochRow { epoch: 1, train_loss: 0.5, val_dice: 0.25, seconds: None }],
        };
        assert_eq!(r.to_csv(), "epoch,train_loss,val_dice,seconds\n1,0.50000000,0.25000000,\n");
    }

    #[test]
    fn fit_rejects_empty_sets() {
        let (mut m, d) = tiny();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(fit(&mut m, &[], &d, &cfg, |_| {}).is_err());
        assert!(fit(&mut m, &d, &[], &cfg, |_| {}).is_err());
        let r = fit(&mut m, &d, &d, &TrainConfig { epochs: 0, ..cfg }, |_| {}).unwrap();
        assert!(r.rows.is_empty());
    }
}
