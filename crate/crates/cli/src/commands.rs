use std::fs;
use std::path::Path;

use nerveseg::checkpoint;
use nerveseg::data::{self, generate_dataset, Sample, SynthCfg};
use nerveseg::error::{Error, Result};
use nerveseg::gradcheck::{run_suite, SuiteOptions};
use nerveseg::models::{count_params, Accounting, Arch, ModelGraph, ModelOptions};
use nerveseg::nn::ShortcutSource;
use nerveseg::training::{evaluate, fit, predict_masks};

use crate::config::RunConfig;

const EVAL_BATCH: usize = 8;

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("size {size:?} is not HEIGHTxWIDTH"));
    let (h, w) = size.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn gen(out: &Path, count: usize, seed: u64, size: &str, p_empty: f64) -> Result<()> {
    let (h, w) = parse_size(size)?;
    let cfg = SynthCfg { h, w, p_empty, seed, ..SynthCfg::default() };
    cfg.validate(16)?;
    let samples = generate_dataset(&cfg, count)?;
    data::write_dataset(out, &samples)?;
    let empty = samples.iter().filter(|s| s.mask.count() == 0).count();
    println!("wrote {count} samples ({empty} without a target) to {}", out.display());
    Ok(())
}

fn load_split(dir: &Path, size: [usize; 2], what: &str) -> Result<Vec<Sample>> {
    let samples = data::read_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("{what} set {} has no images", dir.display())));
    }
    if let Some(s) = samples.iter().find(|s| [s.image.h, s.image.w] != size) {
        return Err(Error::Shape(format!(
            "{} is {}x{}, config expects {}x{}",
            s.id, s.image.h, s.image.w, size[0], size[1]
        )));
    }
    Ok(samples)
}

pub fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let train = load_split(&cfg.train_data, cfg.image_size, "training")?;
    let val = load_split(&cfg.val_data, cfg.image_size, "validation")?;
    let mut model = ModelGraph::<f32>::build(cfg.arch, cfg.model_options())?;
    let tc = cfg.train_config();
    let report = fit(&mut model, &train, &val, &tc, |r| {
        println!("epoch {:>3}  train_loss {:.4}  val_dice {:.4}", r.epoch, r.train_loss, r.val_dice);
    })?;
    let val_dice = match report.last() {
        Some(r) => r.val_dice,
        None => evaluate(&model, &val, tc.threshold, tc.batch_size)?,
    };
    if let Some(dir) = cfg.checkpoint.parent() {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    checkpoint::save(&cfg.checkpoint, &model)?;
    let metrics = cfg.metrics_path();
    if let Some(dir) = metrics.parent() {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(&metrics, report.to_csv()).map_err(io_at(&metrics))?;
    println!("final val_dice {val_dice:.4}");
    Ok(())
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Usage(format!("threshold {t} outside [0, 1)")));
    }
    Ok(())
}

pub fn eval(ckpt: &Path, dir: &Path, threshold: f64) -> Result<()> {
    check_threshold(threshold)?;
    let model = checkpoint::load(ckpt)?;
    let samples = data::read_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("{} has no images", dir.display())));
    }
    println!("{:.4}", evaluate(&model, &samples, threshold, EVAL_BATCH)?);
    Ok(())
}

pub fn predict(ckpt: &Path, dir: &Path, out: &Path, threshold: f64) -> Result<()> {
    check_threshold(threshold)?;
    let model = checkpoint::load(ckpt)?;
    let images = data::read_images(dir)?;
    // masks are not needed; pair each image with a placeholder
    let samples: Vec<Sample> = images
        .into_iter()
        .map(|(id, image)| {
            let mask = data::Mask::empty(image.h, image.w);
            Sample::new(id, image, mask)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<_> = if samples.is_empty() {
        Vec::new()
    } else {
        let masks = predict_masks(&model, &samples, threshold, EVAL_BATCH)?;
        samples.into_iter().map(|s| s.id).zip(masks).collect()
    };
    data::write_submission(out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn params(
    arch: Arch,
    base_filters: Option<usize>,
    expect: Option<usize>,
    bias_under_bn: bool,
    running_stats: bool,
    shortcut_tap: bool,
) -> Result<()> {
    let f = base_filters.unwrap_or_else(|| arch.reference_base_filters());
    let options = ModelOptions {
        bias_under_bn,
        shortcut_source: if shortcut_tap { ShortcutSource::FirstConv } else { ShortcutSource::BlockInput },
        ..ModelOptions::with_base_filters(f)
    };
    let model = ModelGraph::<f32>::build(arch, options)?;
    let count = count_params(&model, Accounting { running_stats });
    let width = count.per_layer.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>12}", "layer", "params");
    for (name, n) in &count.per_layer {
        println!("{name:<width$}  {:>12}", grouped(*n));
    }
    println!("{:<width$}  {:>12}", "total", grouped(count.total));
    if f == arch.reference_base_filters() {
        let reference = arch.reference_param_count();
        let diff = count.total as i64 - reference as i64;
        println!(
            "reference {} for {arch} at base {f}: diff {diff:+} ({:+.3}%)",
            grouped(reference),
            100.0 * diff as f64 / reference as f64
        );
    }
    if let Some(want) = expect {
        if want != count.total {
            return Err(Error::Check(format!("expected {} parameters, counted {}", grouped(want), grouped(count.total))));
        }
    }
    Ok(())
}

pub fn gradcheck(seed: u64, seeds: usize, corrupt: Option<String>) -> Result<()> {
    let opts = SuiteOptions { seed, seeds, corrupt, ..SuiteOptions::default() };
    let report = run_suite(&opts)?;
    print!("{report}");
    if !report.passed() {
        let failed: Vec<_> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        return Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))));
    }
    println!("all checks passed");
    Ok(())
}
