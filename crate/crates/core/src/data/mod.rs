//! Samples, synthetic generation, PGM/RLE formats and batching.

mod batch;
mod io;
pub mod pgm;
pub mod rle;
mod synth;

pub use batch::{make_batches, sequential_batches, Batch};
pub use io::{
    read_dataset, read_images, submission_csv, write_dataset, write_submission, IMAGES_DIR, MASKS_DIR,
};
pub use synth::{background, generate_dataset, generate_sample, Background, SynthCfg};

use crate::error::{shape_err, Result};

/// Grayscale image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("{} pixels for a {h}x{w} image", data.len()));
        }
        Ok(GrayImage { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        GrayImage { h, w, data: vec![v; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

/// Binary mask, `1` marks the target region. Row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("{} cells for a {h}x{w} mask", data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(shape_err!("mask values must be 0 or 1, found {v}"));
        }
        Ok(Mask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Pixels above `threshold` become 1.
    pub fn from_probabilities(h: usize, w: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        Mask::new(h, w, probs.iter().map(|&p| u8::from(p > threshold)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: Mask) -> Result<Self> {
        if image.h != mask.h || image.w != mask.w {
            return Err(shape_err!("image {}x{} vs mask {}x{}", image.h, image.w, mask.h, mask.w));
        }
        Ok(Sample { id: id.into(), image, mask })
    }
}
