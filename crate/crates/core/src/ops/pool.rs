use std::sync::Arc;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Argmax positions recorded by [`maxpool2x2`], consumed by
/// [`max_unpool2x2`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input: Shape,
    /// row-major position inside each 2×2 window: 0 = top-left, 3 = bottom-right
    slots: Vec<u8>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.input.n, self.input.c, self.input.h / 2, self.input.w / 2)
    }

    pub fn slots(&self) -> &[u8] {
        &self.slots
    }

    /// Offset into the pre-pool tensor selected for pooled element `out`.
    #[inline]
    pub fn source_offset(&self, out: usize) -> usize {
        let (oh, ow) = (self.input.h / 2, self.input.w / 2);
        let ox = out % ow;
        let oy = (out / ow) % oh;
        let plane = out / (ow * oh);
        let slot = self.slots[out] as usize;
        let (iy, ix) = (2 * oy + slot / 2, 2 * ox + slot % 2);
        plane * self.input.h * self.input.w + iy * self.input.w + ix
    }
}

pub fn maxpool2x2<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Arc<PoolIndices>)> {
    let xv = tape.value(x);
    let s = xv.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
        return Err(shape_err!("maxpool2x2 needs even, non-zero spatial dims, got {s}"));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let planes = s.n * s.c;
    let mut out = Tensor::zeros([s.n, s.c, oh, ow]);
    let mut slots = vec![0u8; planes * oh * ow];
    let src = xv.data();
    {
        let dst = out.data_mut();
        for p in 0..planes {
            let plane = &src[p * s.h * s.w..(p + 1) * s.h * s.w];
            for oy in 0..oh {
                let top = &plane[2 * oy * s.w..(2 * oy + 1) * s.w];
                let bottom = &plane[(2 * oy + 1) * s.w..(2 * oy + 2) * s.w];
                for ox in 0..ow {
                    let window = [top[2 * ox], top[2 * ox + 1], bottom[2 * ox], bottom[2 * ox + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        // strict comparison keeps the first maximum on ties
                        if window[k] > window[best] {
                            best = k;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    dst[o] = window[best];
                    slots[o] = best as u8;
                }
            }
        }
    }
    let idx = Arc::new(PoolIndices { input: s, slots });
    let saved = Arc::clone(&idx);
    let y = tape.push(OpKind::MaxPool2x2, out, &[x], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        let mut dx = Tensor::zeros(saved.input);
        let d = dx.data_mut();
        for (o, &gv) in g.data().iter().enumerate() {
            d[saved.source_offset(o)] += gv;
        }
        vec![Some(dx)]
    });
    Ok((y, idx))
}

/// Places every value of `y` at the position its pooling window selected;
/// all other cells are zero.
pub fn max_unpool2x2<T: Float>(tape: &mut Tape<T>, y: Var, idx: &Arc<PoolIndices>) -> Result<Var> {
    let yv = tape.value(y);
    if yv.shape() != idx.output_shape() {
        return Err(shape_err!(
            "unpool input {} does not match recorded pooled shape {}",
            yv.shape(),
            idx.output_shape()
        ));
    }
    let mut out = Tensor::zeros(idx.input);
    {
        let d = out.data_mut();
        for (o, &v) in yv.data().iter().enumerate() {
            d[idx.source_offset(o)] = v;
        }
    }
    let saved = Arc::clone(idx);
    Ok(tape.push(OpKind::MaxUnpool2x2, out, &[y], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        let mut dy = Tensor::zeros(saved.output_shape());
        for (o, v) in dy.data_mut().iter_mut().enumerate() {
            *v = g.data()[saved.source_offset(o)];
        }
        vec![Some(dy)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(x: Tensor<f64>) -> (Tensor<f64>, Arc<PoolIndices>) {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let (y, idx) = maxpool2x2(&mut tape, x).unwrap();
        (tape.value(y).clone(), idx)
    }

    #[test]
    fn single_window_picks_bottom_right() {
        let (y, idx) = pool(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.slots(), &[3]);
        assert_eq!(idx.source_offset(0), 3);
    }

    #[test]
    fn ties_pick_top_left() {
        let (y, idx) = pool(Tensor::full([2, 3, 4, 6], 0.7));
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!(idx.slots().iter().all(|&s| s == 0));
    }

    #[test]
    fn odd_dims_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 4]));
        assert!(maxpool2x2(&mut tape, x).is_err());
    }

    #[test]
    fn unpool_zero_input_and_shape_check() {
        let (_, idx) = pool(Tensor::from_fn([1, 2, 4, 4], |i| i as f64));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros([1, 2, 2, 2]));
        let u = max_unpool2x2(&mut tape, z, &idx).unwrap();
        assert_eq!(tape.value(u).shape(), Shape::new(1, 2, 4, 4));
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::<f64>::zeros([1, 1, 2, 2]));
        assert!(max_unpool2x2(&mut tape, wrong, &idx).is_err());
    }

    #[test]
    fn unpool_restores_window_maxima() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![5.0, 1.0, 0.0, 2.0, 3.0, 4.0, 9.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, idx) = maxpool2x2(&mut tape, xv).unwrap();
        let u = max_unpool2x2(&mut tape, y, &idx).unwrap();
        assert_eq!(tape.value(u).data(), &[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0]);
    }
}
