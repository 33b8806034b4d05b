//! Ultrasound-like synthetic images: a smooth background, an optional bright
//! elliptical region with a soft rim, and multiplicative speckle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GrayImage, Mask, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCfg {
    pub h: usize,
    pub w: usize,
    /// Probability that a sample has no target region.
    pub p_empty: f64,
    /// Semi-axis range as a fraction of `min(h, w)`.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Peak intensity added inside the region.
    pub contrast: f64,
    /// Width of the soft rim, in pixels.
    pub rim: f64,
    /// Standard deviation of the multiplicative noise.
    pub speckle: f64,
    pub seed: u64,
}

impl Default for SynthCfg {
    fn default() -> Self {
        SynthCfg {
            h: 64,
            w: 64,
            p_empty: 0.3,
            axis_min: 0.1,
            axis_max: 0.22,
            contrast: 0.3,
            rim: 2.0,
            speckle: 0.2,
            seed: 0,
        }
    }
}

impl SynthCfg {
    /// Spatial sizes must survive `divisor`-fold downsampling.
    pub fn validate(&self, divisor: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.h % divisor != 0 || self.w % divisor != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be positive and divisible by {divisor}",
                self.h, self.w
            )));
        }
        if !(0.0..=1.0).contains(&self.p_empty) {
            return Err(Error::Config(format!("p_empty {} outside [0, 1]", self.p_empty)));
        }
        if !(self.axis_min > 0.0 && self.axis_min <= self.axis_max && self.axis_max <= 0.5) {
            return Err(Error::Config(format!(
                "axis range [{}, {}] must satisfy 0 < min <= max <= 0.5",
                self.axis_min, self.axis_max
            )));
        }
        for (name, v) in [("contrast", self.contrast), ("rim", self.rim), ("speckle", self.speckle)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Parameters of the low-frequency background field.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub level: f64,
    pub tilt: (f64, f64),
    /// (amplitude, fy, fx, phase) wave components, frequencies in cycles per image.
    pub waves: Vec<(f64, f64, f64, f64)>,
}

impl Background {
    pub fn flat(level: f64) -> Self {
        Background { level, tilt: (0.0, 0.0), waves: Vec::new() }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let level = rng.gen_range(0.25..0.45);
        let tilt = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let waves = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.06),
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Background { level, tilt, waves }
    }

    fn at(&self, ny: f64, nx: f64) -> f64 {
        let mut v = self.level + self.tilt.0 * (ny - 0.5) + self.tilt.1 * (nx - 0.5);
        for &(amp, fy, fx, phase) in &self.waves {
            v += amp * (std::f64::consts::TAU * (fy * ny + fx * nx) + phase).sin();
        }
        v.clamp(0.0, 1.0)
    }
}

/// The background field rendered at the configured size.
pub fn background(cfg: &SynthCfg, bg: &Background) -> GrayImage {
    let mut data = Vec::with_capacity(cfg.h * cfg.w);
    for y in 0..cfg.h {
        for x in 0..cfg.w {
            let ny = (y as f64 + 0.5) / cfg.h as f64;
            let nx = (x as f64 + 0.5) / cfg.w as f64;
            data.push(bg.at(ny, nx) as f32);
        }
    }
    GrayImage { h: cfg.h, w: cfg.w, data }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(cfg: &SynthCfg, rng: &mut impl Rng) -> Self {
        let side = cfg.h.min(cfg.w) as f64;
        let lo = cfg.axis_min * side;
        let hi = cfg.axis_max * side;
        let a = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let b = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let reach = a.max(b);
        let cy = rng.gen_range(reach..(cfg.h as f64 - reach).max(reach + 1e-9));
        let cx = rng.gen_range(reach..(cfg.w as f64 - reach).max(reach + 1e-9));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Ellipse { cy, cx, a, b, cos: theta.cos(), sin: theta.sin() }
    }

    /// Normalized radius of pixel centre; `<= 1` is inside.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

pub fn generate_sample(cfg: &SynthCfg, rng: &mut impl Rng, id: impl Into<String>) -> Sample {
    let bg = Background::random(rng);
    let mut image = background(cfg, &bg);
    let mut mask = Mask::empty(cfg.h, cfg.w);
    let empty = rng.gen_bool(cfg.p_empty);
    if !empty {
        let e = Ellipse::random(cfg, rng);
        let short = e.a.min(e.b);
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                let r = e.radius(y, x);
                if r > 1.0 {
                    continue;
                }
                mask.data[y * cfg.w + x] = 1;
                // approximate distance to the rim, in pixels
                let depth = (1.0 - r) * short;
                let lift = if cfg.rim > 0.0 { (depth / cfg.rim).min(1.0) } else { 1.0 };
                let i = y * cfg.w + x;
                image.data[i] = (image.data[i] as f64 + cfg.contrast * (0.35 + 0.65 * lift)) as f32;
            }
        }
    }
    if cfg.speckle > 0.0 {
        for v in &mut image.data {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 * (1.0 + cfg.speckle * n)) as f32;
        }
    }
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }
    Sample { id: id.into(), image, mask }
}

/// `count` samples; sample `i` depends only on `(cfg, i)`.
pub fn generate_dataset(cfg: &SynthCfg, count: usize) -> Result<Vec<Sample>> {
    cfg.validate(1)?;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_sample(cfg, &mut rng, format!("{i:05}"))
        })
        .collect())
}
