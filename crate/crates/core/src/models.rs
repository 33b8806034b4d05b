//! The three segmentation networks: plain U-Net, SegNet with index
//! unpooling, and the residual U-Net whose every stage is a shortcut block.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{decoder_stage, encoder_stage, BlockOptions, Conv, ConvBnRelu, ShortcutSource, Stage, StageKind, StageSpec};
use crate::ops::{self, BatchNormCfg, Mode, PoolIndices};
use crate::params::{Bindings, Ctx, ParamKind, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Unet,
    Segnet,
    Resunet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Unet, Arch::Segnet, Arch::Resunet];

    /// Filter width at the first stage used for the published counts.
    pub fn reference_base_filters(self) -> usize {
        match self {
            Arch::Unet | Arch::Resunet => 32,
            Arch::Segnet => 64,
        }
    }

    /// Published trainable-parameter total for the reference width.
    pub fn reference_param_count(self) -> usize {
        match self {
            Arch::Unet => 7_848_129,
            Arch::Segnet => 31_819_649,
            Arch::Resunet => 8_301_441,
        }
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(self) -> usize {
        match self {
            Arch::Unet | Arch::Resunet => 16,
            Arch::Segnet => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Segnet => "segnet",
            Arch::Resunet => "resunet",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::Unet),
            "segnet" => Ok(Arch::Segnet),
            "resunet" => Ok(Arch::Resunet),
            other => Err(Error::Config(format!("unknown arch {other:?} (expected unet, segnet or resunet)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub base_filters: usize,
    /// Keep conv biases even where BN follows.
    pub bias_under_bn: bool,
    pub scale_b: f64,
    pub shortcut_source: ShortcutSource,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let bn = BatchNormCfg::default();
        ModelOptions {
            base_filters: 32,
            bias_under_bn: false,
            scale_b: 1.0,
            shortcut_source: ShortcutSource::BlockInput,
            bn_eps: bn.eps,
            bn_momentum: bn.momentum,
            seed: 0,
        }
    }
}

impl ModelOptions {
    pub fn with_base_filters(base_filters: usize) -> Self {
        ModelOptions { base_filters, ..Self::default() }
    }

    fn block(&self) -> BlockOptions {
        BlockOptions { bias_under_bn: self.bias_under_bn, scale_b: self.scale_b, shortcut_source: self.shortcut_source }
    }

    pub fn bn(&self) -> BatchNormCfg {
        BatchNormCfg { eps: self.bn_eps, momentum: self.bn_momentum }
    }
}

#[derive(Clone, Debug)]
enum Net {
    UNet { enc: Vec<Stage>, mid: Stage, dec: Vec<Stage>, head: Conv },
    SegNet { enc: Vec<Stage>, dec: Vec<Stage>, head: Conv },
}

/// A fully built network: layer schedule, parameters and forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Float> {
    arch: Arch,
    options: ModelOptions,
    stages: Vec<StageSpec>,
    store: ParamStore<T>,
    net: Net,
}

pub fn build_unet<T: Float>(options: ModelOptions) -> Result<ModelGraph<T>> {
    ModelGraph::build(Arch::Unet, options)
}

pub fn build_resunet<T: Float>(options: ModelOptions) -> Result<ModelGraph<T>> {
    ModelGraph::build(Arch::Resunet, options)
}

pub fn build_segnet<T: Float>(options: ModelOptions) -> Result<ModelGraph<T>> {
    ModelGraph::build(Arch::Segnet, options)
}

fn unet_schedule(f: usize, residual: bool) -> Vec<StageSpec> {
    let stage = |cin, cout, kind| StageSpec { cin, cout, kind, use_shortcut: residual, use_bn: residual, depth: 2 };
    let mut out = Vec::with_capacity(9);
    let mut cin = 1;
    for level in 0..4 {
        let cout = f << level;
        out.push(stage(cin, cout, StageKind::Encoder));
        cin = cout;
    }
    out.push(stage(8 * f, 16 * f, StageKind::Bottleneck));
    for level in (0..4).rev() {
        let cout = f << level;
        // merged input: skip features (cout) then upsampled features (2·cout)
        out.push(stage(cout + 2 * cout, cout, StageKind::Decoder));
    }
    out
}

/// Encoder groups follow VGG16 (2, 2, 3, 3, 3 convs at f, 2f, 4f, 8f, 8f).
/// After each unpool the decoder runs the layers listed below; a group's
/// last conv narrows to the width of the indices replayed next.
fn segnet_schedule(f: usize) -> Vec<StageSpec> {
    let enc = [(1, f, 2), (f, 2 * f, 2), (2 * f, 4 * f, 3), (4 * f, 8 * f, 3), (8 * f, 8 * f, 3)];
    let dec = [(8 * f, 8 * f, 3), (8 * f, 4 * f, 4), (4 * f, 2 * f, 3), (2 * f, f, 2), (f, f, 1)];
    let spec = |(cin, cout, depth), kind| StageSpec { cin, cout, kind, use_shortcut: false, use_bn: true, depth };
    enc.into_iter()
        .map(|e| spec(e, StageKind::Encoder))
        .chain(dec.into_iter().map(|d| spec(d, StageKind::Decoder)))
        .collect()
}

fn segnet_decoder_group<T: Float>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    spec: StageSpec,
    opts: BlockOptions,
) -> Result<Stage> {
    // width is kept until the final conv of the group
    let mut layers = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let cout = if i + 1 == spec.depth { spec.cout } else { spec.cin };
        layers.push(ConvBnRelu::new(store, rng, &format!("{name}.conv{}", i + 1), spec.cin, cout, 3, true, opts.bias_under_bn)?);
    }
    Ok(Stage { spec, body: crate::nn::StageBody::Plain(layers) })
}

impl<T: Float> ModelGraph<T> {
    pub fn build(arch: Arch, options: ModelOptions) -> Result<Self> {
        if options.base_filters == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        if !options.scale_b.is_finite() {
            return Err(Error::Config("scale_b must be finite".into()));
        }
        let f = options.base_filters;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut store = ParamStore::new();
        let opts = options.block();
        let (stages, net) = match arch {
            Arch::Unet | Arch::Resunet => {
                let stages = unet_schedule(f, arch == Arch::Resunet);
                let mut built = Vec::with_capacity(stages.len());
                for (i, spec) in stages.iter().enumerate() {
                    let name = match i {
                        0..=3 => format!("enc{}", i + 1),
                        4 => "mid".to_string(),
                        _ => format!("dec{}", 9 - i),
                    };
                    built.push(Stage::new(&mut store, &mut rng, &name, *spec, opts)?);
                }
                let head = Conv::new(&mut store, &mut rng, "head", f, 1, 1, true)?;
                let mut it = built.into_iter();
                let enc: Vec<Stage> = it.by_ref().take(4).collect();
                let mid = it.next().expect("bottleneck stage");
                let dec: Vec<Stage> = it.collect();
                (stages, Net::UNet { enc, mid, dec, head })
            }
            Arch::Segnet => {
                let stages = segnet_schedule(f);
                let mut enc = Vec::new();
                let mut dec = Vec::new();
                for (i, spec) in stages.iter().enumerate() {
                    if spec.kind == StageKind::Encoder {
                        enc.push(Stage::new(&mut store, &mut rng, &format!("enc{}", i + 1), *spec, opts)?);
                    } else {
                        let level = 10 - i;
                        dec.push(segnet_decoder_group(&mut store, &mut rng, &format!("dec{level}"), *spec, opts)?);
                    }
                }
                let head = Conv::new(&mut store, &mut rng, "head", f, 1, 1, true)?;
                (stages, Net::SegNet { enc, dec, head })
            }
        };
        Ok(ModelGraph { arch, options, stages, store, net })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of 3×3 and 1×1 conv layers, head included.
    pub fn conv_layers(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.kind == ParamKind::Weight).count()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let d = self.arch.spatial_divisor();
        if s.c != 1 {
            return Err(shape_err!("{} expects single-channel input, got {s}", self.arch));
        }
        if s.n == 0 || s.h == 0 || s.w == 0 || s.h % d != 0 || s.w % d != 0 {
            return Err(shape_err!("{} needs height and width divisible by {d}, got {s}", self.arch));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and reports which leaves hold the
    /// parameters. Train mode updates BN running statistics.
    pub fn forward_on_tape(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Bindings)> {
        self.check_input(tape.value(x))?;
        let bn = self.options.bn();
        let mut ctx = match mode {
            Mode::Train => Ctx::train(tape, &mut self.store, bn),
            Mode::Infer => Ctx::infer(tape, &self.store, bn),
        };
        let y = run(&self.net, &mut ctx, x)?;
        Ok((y, ctx.into_bindings()))
    }

    /// Inference without gradients; shared access only.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::infer(&mut tape, &self.store, self.options.bn());
        let y = run(&self.net, &mut ctx, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Probability map with the input's height and width.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Infer => self.infer(x),
            Mode::Train => {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let (y, _) = self.forward_on_tape(&mut tape, xv, Mode::Train)?;
                Ok(tape.value(y).clone())
            }
        }
    }

    /// Replaces the BN running statistics with the plain average of the
    /// batch statistics seen over `batches`. Trainable parameters are
    /// unchanged; a model without batch norm is unaffected.
    pub fn recalibrate_bn<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<()>
    where
        T: 'a,
    {
        if self.store.iter().all(|(_, p)| p.kind.trainable()) {
            return Ok(());
        }
        let momentum = self.options.bn_momentum;
        let mut result = Ok(());
        for (i, x) in batches.into_iter().enumerate() {
            self.options.bn_momentum = i as f64 / (i + 1) as f64;
            result = self.forward(x, Mode::Train).map(drop);
            if result.is_err() {
                break;
            }
        }
        self.options.bn_momentum = momentum;
        result
    }

    /// Same architecture and parameters at another precision.
    pub fn cast<U: Float>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch,
            options: self.options,
            stages: self.stages.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }
}

fn run<T: Float>(net: &Net, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let logits = match net {
        Net::UNet { enc, mid, dec, head } => {
            let mut skips = Vec::with_capacity(enc.len());
            let mut h = x;
            for stage in enc {
                let e = encoder_stage(ctx, stage, h)?;
                skips.push(e.features);
                h = e.pooled;
            }
            h = mid.body(ctx, h)?;
            for (stage, skip) in dec.iter().zip(skips.into_iter().rev()) {
                h = decoder_stage(ctx, stage, h, skip)?;
            }
            head.forward(ctx, h)?
        }
        Net::SegNet { enc, dec, head } => {
            let mut indices: Vec<Arc<PoolIndices>> = Vec::with_capacity(enc.len());
            let mut h = x;
            for stage in enc {
                let e = encoder_stage(ctx, stage, h)?;
                indices.push(e.indices);
                h = e.pooled;
            }
            for (stage, idx) in dec.iter().zip(indices.iter().rev()) {
                h = ops::max_unpool2x2(ctx.tape, h, idx)?;
                h = stage.body(ctx, h)?;
            }
            head.forward(ctx, h)?
        }
    };
    Ok(ops::sigmoid(ctx.tape, logits))
}

/// How parameter totals are tallied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accounting {
    /// Include BN running mean/var alongside gamma/beta.
    pub running_stats: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Per layer (parameter name up to its last `.`), in registry order.
    pub per_layer: Vec<(String, usize)>,
}

pub fn count_params<T: Float>(model: &ModelGraph<T>, accounting: Accounting) -> ParamCount {
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    for (_, p) in model.params().iter() {
        if !p.kind.trainable() && !accounting.running_stats {
            continue;
        }
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
        match per_layer.last_mut() {
            Some((name, n)) if name == layer => *n += p.value.numel(),
            _ => per_layer.push((layer.to_string(), p.value.numel())),
        }
    }
    let total = per_layer.iter().map(|(_, n)| n).sum();
    ParamCount { total, per_layer }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn small(arch: Arch) -> ModelGraph<f32> {
        ModelGraph::build(arch, ModelOptions { base_filters: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn recalibrated_stats_match_the_batch() {
        let x = Tensor::from_fn([3, 1, 32, 32], |i| ((i * 7919) % 97) as f32 / 97.0);
        for arch in Arch::ALL {
            let mut m = small(arch);
            m.recalibrate_bn([&x, &x, &x]).unwrap();
            assert_eq!(m.options().bn_momentum, ModelOptions::default().bn_momentum);
            let infer = m.infer(&x).unwrap();
            let train = m.clone().forward(&x, Mode::Train).unwrap();
            assert!(infer.max_abs_diff(&train) < 1e-4, "{arch}: {}", infer.max_abs_diff(&train));
        }
    }

    #[test]
    fn output_shape_and_range() {
        for arch in Arch::ALL {
            let model = small(arch);
            let x = Tensor::from_fn([2, 1, 64, 32], |i| ((i * 31) % 97) as f32 / 97.0);
            let y = model.infer(&x).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 1, 64, 32), "{arch}");
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn divisibility_enforced() {
        let unet = small(Arch::Unet);
        assert!(unet.infer(&Tensor::zeros([1, 1, 48, 48])).is_ok());
        assert!(unet.infer(&Tensor::zeros([1, 1, 40, 48])).is_err());
        let segnet = small(Arch::Segnet);
        assert!(segnet.infer(&Tensor::zeros([1, 1, 48, 64])).is_err());
        assert!(segnet.infer(&Tensor::zeros([1, 1, 64, 64])).is_ok());
        assert!(unet.infer(&Tensor::zeros([1, 2, 16, 16])).is_err());
    }

    #[test]
    fn zero_input_zero_head_bias_gives_half() {
        let mut model = small(Arch::Unet);
        let y = model.forward(&Tensor::zeros([1, 1, 16, 16]), Mode::Infer).unwrap();
        // all biases start at zero, so every activation is zero
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn infer_is_deterministic_and_differs_from_train_with_bn() {
        let mut model = small(Arch::Resunet);
        let x = Tensor::from_fn([2, 1, 16, 16], |i| (i as f32 * 0.17).sin().abs());
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        assert_eq!(a, b);
        let t = model.forward(&x, Mode::Train).unwrap();
        assert!(t.max_abs_diff(&a) > 1e-4);
    }

    #[test]
    fn shortcut_in_every_resunet_stage() {
        let model = small(Arch::Resunet);
        assert_eq!(model.stages().len(), 9);
        assert!(model.stages().iter().all(|s| s.use_shortcut && s.use_bn));
        let shortcuts = model.params().iter().filter(|(_, p)| p.name.ends_with("shortcut.conv.weight")).count();
        assert_eq!(shortcuts, 9);
    }

    #[test]
    fn unet_first_layer_and_totals() {
        let model = ModelGraph::<f32>::build(Arch::Unet, ModelOptions::with_base_filters(32)).unwrap();
        let count = count_params(&model, Accounting::default());
        assert_eq!(count.per_layer[0], ("enc1.conv1.conv".to_string(), 320));
        assert_eq!(count.total, count.per_layer.iter().map(|(_, n)| n).sum::<usize>());
        // Table-1 layout: 18 3×3 convs plus the 1×1 head
        assert_eq!(model.conv_layers(), 19);
    }

    #[test]
    fn resunet_has_more_parameters() {
        for f in [1, 4, 8, 32] {
            let u = ModelGraph::<f32>::build(Arch::Unet, ModelOptions::with_base_filters(f)).unwrap();
            let r = ModelGraph::<f32>::build(Arch::Resunet, ModelOptions::with_base_filters(f)).unwrap();
            assert!(count_params(&r, Accounting::default()).total > count_params(&u, Accounting::default()).total);
        }
    }

    #[test]
    fn arch_parse() {
        assert_eq!("segnet".parse::<Arch>().unwrap(), Arch::Segnet);
        assert!("vgg".parse::<Arch>().is_err());
        assert!(ModelGraph::<f32>::build(Arch::Unet, ModelOptions::with_base_filters(0)).is_err());
    }
}
