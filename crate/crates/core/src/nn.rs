//! Layer and stage building blocks shared by all three networks.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::ops::{self, Padding, PoolIndices, RunningStats};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

/// 3×3 or 1×1 convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    /// Kaiming-normal weights (std = √(2 / fan_in)), zero bias.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn([cout, cin, kernel, kernel], |_| T::of(normal.sample(rng)));
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(Shape::vector(cout)))?)
        } else {
            None
        };
        Ok(Conv { weight, bias, cin, cout, kernel })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::conv2d(ctx.tape, x, w, b, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let v = Shape::vector(channels);
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Gamma, Tensor::ones(v))?,
            beta: store.add(format!("{name}.beta"), ParamKind::Beta, Tensor::zeros(v))?,
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(v))?,
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::ones(v))?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let (mode, cfg) = (ctx.mode(), ctx.bn);
        ctx.with_running(self.running_mean, self.running_var, |tape, mean, var| {
            ops::batchnorm2d(tape, x, gamma, beta, RunningStats { mean, var }, mode, cfg)
        })
    }
}

/// conv → (BN) → ReLU. The conv carries a bias only when BN is absent,
/// unless `bias_under_bn` is requested.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        use_bn: bool,
        bias_under_bn: bool,
    ) -> Result<Self> {
        let conv = Conv::new(store, rng, &format!("{name}.conv"), cin, cout, kernel, !use_bn || bias_under_bn)?;
        let bn = if use_bn { Some(BatchNorm::new(store, &format!("{name}.bn"), cout)?) } else { None };
        Ok(ConvBnRelu { conv, bn })
    }

    /// conv → (BN), without the activation.
    pub fn pre_activation<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        match &self.bn {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.pre_activation(ctx, x)?;
        Ok(ops::relu(ctx.tape, y))
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }
}

/// Tensor the 1×1 projection reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutSource {
    /// The block input x, projected cin → cout.
    #[default]
    BlockInput,
    /// The activated output of the first branch conv, projected cout → cout.
    FirstConv,
}

/// Residual stage computing `ReLU(F(x) + b · P(x))`.
///
/// `F` is conv3 → BN → ReLU → conv3 → BN and `P` a 1×1 conv (→ BN). With
/// the default [`ShortcutSource::BlockInput`] the projection reads x itself.
#[derive(Clone, Debug)]
pub struct ShortcutBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
    pub projection: ConvBnRelu,
    pub scale_b: f64,
    pub source: ShortcutSource,
}

impl ShortcutBlock {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let cin = ctx.tape.value(x).shape().c;
        if cin != self.first.conv.cin {
            return Err(shape_err!("shortcut block expects {} channels, got {cin}", self.first.conv.cin));
        }
        let h = self.first.forward(ctx, x)?;
        let branch = self.second.pre_activation(ctx, h)?;
        let tap = match self.source {
            ShortcutSource::BlockInput => x,
            ShortcutSource::FirstConv => h,
        };
        let proj = self.projection.pre_activation(ctx, tap)?;
        let sum = ops::add_scaled(ctx.tape, branch, proj, T::of(self.scale_b))?;
        Ok(ops::relu(ctx.tape, sum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Encoder,
    Bottleneck,
    Decoder,
}

/// One row group of a layer schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub cin: usize,
    pub cout: usize,
    pub kind: StageKind,
    pub use_shortcut: bool,
    pub use_bn: bool,
    /// Number of 3×3 convs in the stage body.
    pub depth: usize,
}

/// Options shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub bias_under_bn: bool,
    pub scale_b: f64,
    pub shortcut_source: ShortcutSource,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions { bias_under_bn: false, scale_b: 1.0, shortcut_source: ShortcutSource::BlockInput }
    }
}

#[derive(Clone, Debug)]
pub enum StageBody {
    Plain(Vec<ConvBnRelu>),
    Shortcut(ShortcutBlock),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub spec: StageSpec,
    pub body: StageBody,
}

impl Stage {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        spec: StageSpec,
        opts: BlockOptions,
    ) -> Result<Self> {
        if spec.cout == 0 || spec.cin == 0 {
            return Err(shape_err!("stage {name} needs positive channel counts"));
        }
        let body = if spec.use_shortcut {
            let proj_cin = match opts.shortcut_source {
                ShortcutSource::BlockInput => spec.cin,
                ShortcutSource::FirstConv => spec.cout,
            };
            let mk = |store: &mut ParamStore<T>, rng: &mut _, part: &str, cin, k| {
                ConvBnRelu::new(store, rng, &format!("{name}.{part}"), cin, spec.cout, k, spec.use_bn, opts.bias_under_bn)
            };
            StageBody::Shortcut(ShortcutBlock {
                first: mk(store, rng, "conv1", spec.cin, 3)?,
                second: mk(store, rng, "conv2", spec.cout, 3)?,
                projection: mk(store, rng, "shortcut", proj_cin, 1)?,
                scale_b: opts.scale_b,
                source: opts.shortcut_source,
            })
        } else {
            let mut layers = Vec::with_capacity(spec.depth);
            for i in 0..spec.depth {
                let cin = if i == 0 { spec.cin } else { spec.cout };
                layers.push(ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.conv{}", i + 1),
                    cin,
                    spec.cout,
                    3,
                    spec.use_bn,
                    opts.bias_under_bn,
                )?);
            }
            StageBody::Plain(layers)
        };
        Ok(Stage { spec, body })
    }

    /// Stage body without pooling or merging.
    pub fn body<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let cin = ctx.tape.value(x).shape().c;
        if cin != self.spec.cin {
            return Err(shape_err!("stage expects {} input channels, got {cin}", self.spec.cin));
        }
        match &self.body {
            StageBody::Shortcut(block) => block.forward(ctx, x),
            StageBody::Plain(layers) => layers.iter().try_fold(x, |h, layer| layer.forward(ctx, h)),
        }
    }
}

/// Output of a contracting stage.
pub struct Encoded {
    /// Full-resolution features kept for the skip merge.
    pub features: Var,
    pub pooled: Var,
    pub indices: Arc<PoolIndices>,
}

pub fn encoder_stage<T: Float>(ctx: &mut Ctx<'_, T>, stage: &Stage, x: Var) -> Result<Encoded> {
    let s = ctx.tape.value(x).shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(shape_err!("encoder stage input {s} has odd spatial dims"));
    }
    let features = stage.body(ctx, x)?;
    let (pooled, indices) = ops::maxpool2x2(ctx.tape, features)?;
    Ok(Encoded { features, pooled, indices })
}

/// Upsample `x`, merge as `[skip, up]` along channels, then run the body.
pub fn decoder_stage<T: Float>(ctx: &mut Ctx<'_, T>, stage: &Stage, x: Var, skip: Var) -> Result<Var> {
    let (xs, ss) = (ctx.tape.value(x).shape(), ctx.tape.value(skip).shape());
    if ss.h != 2 * xs.h || ss.w != 2 * xs.w || ss.n != xs.n {
        return Err(shape_err!("skip {ss} must be twice the spatial size of {xs}"));
    }
    let up = ops::upsample_nearest2x(ctx.tape, x);
    let merged = ops::concat_channels(ctx.tape, skip, up)?;
    stage.body(ctx, merged)
}
