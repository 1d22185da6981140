use std::path::Path;

use asps::cli::{run, ABLATION_HEADER};
use asps::config::RunConfig;
use asps::training::{Checkpoint, Trainer};

const TINY: &str = "\
seed = 0
data.n_train = 6
data.n_val = 4
data.n_test = 3
model.vit_input = 16
model.cnn_input = 8
model.patch = 4
model.depth = 2
model.dim = 8
model.heads = 2
model.mlp_ratio = 2
model.neck_dim = 8
model.cnn_channels = 4,8
model.intermediate_block_index = 0
decoder.heads = 2
decoder.mlp_dim = 8
decoder.blocks = 2
decoder.cross_heads = 2
decoder.cross_head_dim = 4
decoder.upscale_channels = 4,4
decoder.iou_hidden = 8
train.lr = 0.001
train.batch_size = 2
train.max_iters = 4
train.eval_every = 2
";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    let text = format!("{TINY}out.dir = {}\n{extra}", dir.join("out").display());
    std::fs::write(&p, text).unwrap();
    p
}

fn asps(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["asps"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn synth_then_eval_untrained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("pairs");
    let (code, _, err) = asps(&["synth", "--spec", cfg.to_str().unwrap(), "--n", "5", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 6);

    let rc = RunConfig::load(&cfg).unwrap();
    let ckpt = dir.path().join("init.ckpt");
    Trainer::new(rc.model.clone(), rc.train.clone())
        .unwrap()
        .checkpoint(&rc.to_text())
        .save(&ckpt)
        .unwrap();
    let (code, out, err) = asps(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().next().unwrap(), "index,dice,iou,c,c_i,c_p");
    let dice = column(&out, "dice");
    assert_eq!(dice.len(), 5);
    assert!(dice.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn gradcheck_reports_every_case() {
    let (code, out, err) = asps(&["gradcheck"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().count() > 10, "{out}");
}

#[test]
fn eval_reproduces_the_training_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (code, summary, err) = asps(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let held_out = column(&summary, "held_out_dice")[0];
    let out = dir.path().join("out");
    for f in ["best.ckpt", "final.ckpt", "history.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let final_ckpt = out.join("final.ckpt");
    let (code, csv, err) = asps(&["eval", "--ckpt", final_ckpt.to_str().unwrap(), "--split", "val"]);
    assert_eq!(code, 0, "{err}");
    let dice = column(&csv, "dice");
    assert_eq!(dice.len(), 4);
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    assert!((mean - held_out).abs() <= 1e-6, "eval {mean} vs train {held_out}");

    assert!(Checkpoint::load(&final_ckpt).unwrap().text.contains("train.max_iters = 4"));
    let (code, csv, _) = asps(&["analyze", "--ckpt", final_ckpt.to_str().unwrap(), "--n", "4"]);
    assert_eq!(code, 0);
    assert!(csv.starts_with("branch,freq,delta_log_amp\n"));
    assert!(csv.trim_end().lines().last().unwrap().starts_with("high_freq_gap,"));
}

#[test]
fn ablation_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.max_iters = 2\n");
    let (code, csv, err) = asps(&["ablate", "--config", cfg.to_str().unwrap(), "--seeds", "0"]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(lines.len(), 14);
    let tables: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    let count = |t: &str| tables.iter().filter(|x| **x == t).count();
    assert_eq!((count("cfa_upr"), count("ca_fusion_pe"), count("tn_nn_hint")), (4, 4, 5));
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), ABLATION_HEADER.split(',').count());
    }
    // cells with the same switches report the same numbers
    let row = |t: &str, c: &str| lines.iter().find(|l| l.starts_with(&format!("{t},{c},"))).unwrap();
    let tail = |l: &str| l.split(',').skip(2).collect::<Vec<_>>().join(",");
    assert_eq!(tail(row("cfa_upr", "upr")), tail(row("ca_fusion_pe", "upr")));
    assert_eq!(tail(row("cfa_upr", "cfa+upr")), tail(row("ca_fusion_pe", "ca+fusion+pe")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "model.wings = 2\n");
    let (code, _, err) = asps(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("wings"), "{err}");
    let zero_lr = write_config(dir.path(), "train.lr = 0\n");
    assert_eq!(asps(&["train", "--config", zero_lr.to_str().unwrap()]).0, 2);
    assert_eq!(asps(&["train"]).0, 2);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(asps(&["eval", "--ckpt", missing.to_str().unwrap()]).0, 1);
}
