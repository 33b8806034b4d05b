use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Stacked images and masks, both `(n, 1, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stack(samples: &[&Sample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Usage("cannot stack zero samples".into()))?;
        let (h, w) = (first.image.h, first.image.w);
        let mut images = Vec::with_capacity(samples.len() * h * w);
        let mut masks = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.image.h, s.image.w) != (h, w) || (s.mask.h, s.mask.w) != (h, w) {
                return Err(shape_err!(
                    "sample {:?} is {}x{}, batch is {h}x{w}",
                    s.id,
                    s.image.h,
                    s.image.w
                ));
            }
            images.extend_from_slice(&s.image.data);
            masks.extend(s.mask.data.iter().map(|&m| m as f32));
        }
        let shape = Shape::new(samples.len(), 1, h, w);
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::from_vec(shape, images)?,
            masks: Tensor::from_vec(shape, masks)?,
        })
    }
}

fn chunk(samples: &[Sample], order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Usage("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    order
        .chunks(batch_size)
        .map(|idx| Batch::stack(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Shuffled batches; the last one may be short.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    chunk(samples, &order, batch_size)
}

/// Batches in input order.
pub fn sequential_batches(samples: &[Sample], batch_size: usize) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..samples.len()).collect();
    chunk(samples, &order, batch_size)
}
