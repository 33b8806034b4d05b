//! Smoothed Dice loss and the hard Dice coefficient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Var};
use crate::data::Mask;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiceLossCfg {
    /// Smoothing term added to numerator and denominator.
    pub k: f64,
}

impl Default for DiceLossCfg {
    fn default() -> Self {
        DiceLossCfg { k: 1.0 }
    }
}

impl DiceLossCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("dice smoothing k must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

struct Sums {
    inter: f64,
    denom: f64,
}

fn sums<T: Float>(x: &[T], y: &[T], k: f64) -> Sums {
    let mut inter = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sx += a;
        sy += b;
    }
    Sums { inter, denom: sx + sy + k }
}

/// `1 − (2 Σ xy + k) / (Σ x + Σ y + k)` over one sample.
pub fn dice_similarity<T: Float>(x: &[T], y: &[T], k: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_err!("dice: prediction has {} values, target {}", x.len(), y.len()));
    }
    let s = sums(x, y, k);
    Ok(1.0 - (2.0 * s.inter + k) / s.denom)
}

/// Mean [`dice_similarity`] over the batch, recorded on the tape.
/// `target` is a constant.
pub fn dice_loss<T: Float>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, cfg: DiceLossCfg) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(pred).shape();
    if shape != target.shape() {
        return Err(shape_err!("dice: prediction {shape} vs target {}", target.shape()));
    }
    if shape.n == 0 {
        return Err(Error::Usage("dice loss over an empty batch".into()));
    }
    let k = cfg.k;
    let n = shape.n;
    let x = tape.value(pred);
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let s = sums(x.sample(i), target.sample(i), k);
        total += 1.0 - (2.0 * s.inter + k) / s.denom;
        per_sample.push(s);
    }
    let loss = Tensor::scalar(T::of(total / n as f64));
    let y = tape.constant(target.clone());
    let out = tape.push(OpKind::Custom("dice_loss"), loss, &[pred, y], move |g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>| {
        let scale = g.data()[0].as_f64() / n as f64;
        let (x, y) = (inputs[0], inputs[1]);
        let mut dx = Tensor::zeros(x.shape());
        let len = x.numel() / n;
        for (i, s) in per_sample.iter().enumerate() {
            let num = 2.0 * s.inter + k;
            let d2 = s.denom * s.denom;
            let ys = y.sample(i);
            let out = &mut dx.data_mut()[i * len..(i + 1) * len];
            for (o, &yj) in out.iter_mut().zip(ys) {
                // d/dx_j of −num/denom
                *o = T::of(scale * (num - 2.0 * yj.as_f64() * s.denom) / d2);
            }
        }
        vec![Some(dx), None]
    });
    Ok(out)
}

/// `2|X∩Y| / (|X| + |Y|)`, with two empty masks scoring 1.
pub fn dice_coefficient(x: &Mask, y: &Mask) -> Result<f64> {
    if (x.h, x.w) != (y.h, y.w) {
        return Err(shape_err!("dice: masks {}x{} and {}x{}", x.h, x.w, y.h, y.w));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in x.data.iter().zip(&y.data) {
        inter += usize::from(a & b);
        total += usize::from(a) + usize::from(b);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four(on: [usize; 4]) -> Vec<f64> {
        let mut v = vec![0.0; 16];
        for i in on {
            v[i] = 1.0;
        }
        v
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(dice_similarity(&[0.0f64; 9], &[0.0; 9], 1.0).unwrap(), 0.0);
        let a = four([0, 1, 2, 3]);
        assert_eq!(dice_similarity(&a, &a, 1.0).unwrap(), 0.0);
        let b = four([4, 5, 6, 7]);
        assert!((dice_similarity(&a, &b, 1.0).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!(dice_similarity(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn loss_is_batch_mean() {
        let mut x = four([0, 1, 2, 3]);
        x.extend(four([0, 1, 2, 3]));
        let mut y = four([0, 1, 2, 3]);
        y.extend(four([8, 9, 10, 11]));
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec([2, 1, 4, 4], x).unwrap(), true);
        let l = dice_loss(&mut tape, xv, &Tensor::from_vec([2, 1, 4, 4], y).unwrap(), DiceLossCfg::default()).unwrap();
        assert!((tape.value(l).data()[0] - 4.0 / 9.0).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(xv).is_some());
    }

    #[test]
    fn loss_errors() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::zeros([0, 1, 2, 2]), true);
        assert!(matches!(dice_loss(&mut tape, xv, &Tensor::zeros([0, 1, 2, 2]), DiceLossCfg::default()), Err(Error::Usage(_))));
        let xv = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(matches!(dice_loss(&mut tape, xv, &Tensor::zeros([1, 1, 2, 3]), DiceLossCfg::default()), Err(Error::Shape(_))));
        assert!(dice_loss(&mut tape, xv, &Tensor::zeros([1, 1, 2, 2]), DiceLossCfg { k: 0.0 }).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let m = |v: &[u8]| Mask::new(2, 2, v.to_vec()).unwrap();
        assert_eq!(dice_coefficient(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&m(&[1, 1, 0, 0]), &m(&[0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(dice_coefficient(&Mask::empty(3, 3), &Mask::empty(3, 2)).is_err());
    }
}
