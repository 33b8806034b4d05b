use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nerveseg::data::rle;

fn nerveseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerveseg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in ["images", "masks"] {
        let mut entries: Vec<_> = fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((format!("{dir}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out
}

fn gen(dir: &Path, count: usize, seed: u64, size: &str) {
    let o = nerveseg(&["gen", "--out", dir.to_str().unwrap(), "--count", &count.to_string(), "--seed", &seed.to_string(), "--size", size]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "arch": "resunet", "base_filters": 2, "image_size": [16, 16], "epochs": {epochs}, "batch_size": 3,
  "lr": 0.01, "seed": 4, "train_data": "train", "val_data": "val", "checkpoint": "out/model.ckpt"
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 10, 1, "64x64");
    gen(&b, 10, 1, "64x64");
    let ta = tree(&a);
    assert_eq!(ta.len(), 20);
    assert_eq!(ta, tree(&b));
    assert!(ta.iter().any(|(n, _)| n == "masks/00003_mask.pgm"));
}

#[test]
fn gen_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("none");
    gen(&d, 0, 0, "64x64");
    assert!(tree(&d).is_empty());
    let o = nerveseg(&["gen", "--out", tmp.path().join("bad").to_str().unwrap(), "--size", "63x63"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = nerveseg(&["gen", "--out", blocker.join("sub").to_str().unwrap(), "--count", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: io: "), "{}", stderr(&o));
}

#[test]
fn params_tables() {
    let o = nerveseg(&["params", "--arch", "segnet", "--base-filters", "64", "--bias-under-bn", "--count-running-stats", "--expect", "31819649"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("31,819,649"));

    let o = nerveseg(&["params", "--arch", "unet", "--base-filters", "32"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut layers = 0;
    let mut total = None;
    for line in text.lines().skip(1) {
        let mut cols = line.split_whitespace();
        let (Some(name), Some(n)) = (cols.next(), cols.next()) else { continue };
        if name == "reference" {
            continue;
        }
        let n: usize = n.replace(',', "").parse().unwrap();
        if name == "total" {
            total = Some(n);
        } else {
            layers += n;
        }
    }
    assert_eq!(Some(layers), total);

    let o = nerveseg(&["params", "--arch", "unet", "--expect", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: check: "));
    let o = nerveseg(&["params", "--arch", "vgg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: usage: "));
}

#[test]
fn train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(&root.join("train"), 6, 1, "16x16");
    gen(&root.join("val"), 4, 2, "16x16");
    let cfg = write_config(root, 2);

    let run = || {
        let o = nerveseg(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("final val_dice"));
        (fs::read(root.join("out/metrics.csv")).unwrap(), fs::read(root.join("out/model.ckpt")).unwrap())
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    let metrics = String::from_utf8(m1).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,train_loss,val_dice,seconds\n1,"));

    let ckpt = root.join("out/model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let val = root.join("val");
    let val = val.to_str().unwrap();
    let e1 = nerveseg(&["eval", "--checkpoint", ckpt, "--data", val]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    let dice: f64 = stdout(&e1).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert_eq!(stdout(&e1), stdout(&nerveseg(&["eval", "--checkpoint", ckpt, "--data", val])));

    // threshold 0 marks every pixel, so Dice is 2|Y| / (|Y| + hw)
    let samples = nerveseg::data::read_dataset(Path::new(val)).unwrap();
    let expected: f64 = samples
        .iter()
        .map(|s| {
            let y = s.mask.count() as f64;
            2.0 * y / (y + 256.0)
        })
        .sum::<f64>()
        / samples.len() as f64;
    let e0 = nerveseg(&["eval", "--checkpoint", ckpt, "--data", val, "--threshold", "0"]);
    assert_eq!(stdout(&e0).trim(), format!("{expected:.4}"));

    let sub = root.join("sub.csv");
    let p = nerveseg(&["predict", "--checkpoint", ckpt, "--data", val, "--out", sub.to_str().unwrap()]);
    assert!(p.status.success(), "{}", stderr(&p));
    let csv = fs::read_to_string(&sub).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("img,pixels"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), samples.len());
    let model = nerveseg::checkpoint::load(Path::new(ckpt)).unwrap();
    let preds = nerveseg::training::predict_masks(&model, &samples, 0.5, 8).unwrap();
    for ((row, s), pred) in rows.iter().zip(&samples).zip(&preds) {
        let (id, pixels) = row.split_once(',').unwrap();
        assert_eq!(id, s.id);
        assert_eq!(&rle::decode(pixels, 16, 16).unwrap(), pred);
    }

    // a head bias this negative predicts nothing anywhere
    let mut silent = model.clone();
    let id = silent.params().id("head.bias").unwrap();
    silent.params_mut().value_mut(id).fill(-80.0);
    let silent_ckpt = root.join("silent.ckpt");
    nerveseg::checkpoint::save(&silent_ckpt, &silent).unwrap();
    let p = nerveseg(&["predict", "--checkpoint", silent_ckpt.to_str().unwrap(), "--data", val, "--out", sub.to_str().unwrap()]);
    assert!(p.status.success());
    let expected: String = std::iter::once("img,pixels\n".to_string())
        .chain(samples.iter().map(|s| format!("{},\n", s.id)))
        .collect();
    assert_eq!(fs::read_to_string(&sub).unwrap(), expected);
}

#[test]
fn zero_epochs_writes_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(&root.join("train"), 3, 1, "16x16");
    gen(&root.join("val"), 2, 2, "16x16");
    let cfg = write_config(root, 0);
    let o = nerveseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(root.join("out/metrics.csv")).unwrap(), "epoch,train_loss,val_dice,seconds\n");
    let model = nerveseg::checkpoint::load(&root.join("out/model.ckpt")).unwrap();
    let fresh = nerveseg::models::ModelGraph::<f32>::build(model.arch(), *model.options()).unwrap();
    assert_eq!(model.params(), fresh.params());
}

#[test]
fn config_and_checkpoint_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("bad.json");
    fs::write(&cfg, r#"{"arch": "unet", "learning_rate": 1}"#).unwrap();
    let o = nerveseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));

    gen(&root.join("val"), 1, 2, "16x16");
    let ckpt = root.join("junk.ckpt");
    fs::write(&ckpt, b"NOTACKPT").unwrap();
    let o = nerveseg(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", root.join("val").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error: parse: "), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn gradcheck_command() {
    let o = nerveseg(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all checks passed"));
    assert_eq!(stdout(&o), stdout(&nerveseg(&["gradcheck", "--seed", "3"])));
    let bad = nerveseg(&["gradcheck", "--seed", "3", "--seeds", "1", "--corrupt", "conv2d_3x3"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL"));
    assert!(stderr(&bad).starts_with("error: check: "));
}
