//! Criteria 1-10, run in order. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use asps::analysis::compare_branches;
use asps::cli::{ablation_cells, load_splits, run_cell, CellResult, Splits};
use asps::config::RunConfig;
use asps::data_metrics::{dice_iou, dice_iou_counts, Dataset, Split};
use asps::grad_suite::run_suite;
use asps::numerics::{Graph, Tensor, Var};
use asps::training::{
    branch_features, evaluate, fit, EvalSummary, FitOptions, HistoryRow, NormPolicy, TrainConfig, Trainer,
};
use asps::upr::{
    combine_confidence, confidence_loss, hint_mix, pixel_confidence, sample_gates, segmentation_loss, total_loss,
    GateMode, C_FLOOR,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// The default run, trained once and shared by criteria 4, 5, 6, 7 and 9.
struct Reference {
    cfg: RunConfig,
    splits: Splits,
    trainer: Trainer,
    history: Vec<HistoryRow>,
    elapsed: Duration,
    val: EvalSummary,
    ood: EvalSummary,
}

fn train_reference() -> Reference {
    let cfg = RunConfig::default();
    let splits = load_splits(&cfg).expect("default splits");
    let start = Instant::now();
    let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone()).expect("default trainer");
    let out = fit(trainer, &splits.train, None, &FitOptions::default()).expect("default training");
    let elapsed = start.elapsed();
    let val = evaluate(&cfg.model, &out.trainer.params, &splits.val).expect("val eval");
    let ood = evaluate(&cfg.model, &out.trainer.params, &splits.ood).expect("ood eval");
    Reference {
        cfg,
        splits,
        trainer: out.trainer,
        history: out.history,
        elapsed,
        val,
        ood,
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite();
    let t = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    check(reports.iter().all(|r| r.tolerance <= 1e-4), "a case uses a tolerance above 1e-4")?;
    check(failed.is_empty(), format!("failed: {failed:?}"))?;
    check(t.as_secs_f64() <= 60.0, format!("took {t:?}"))?;
    Ok(format!("{} cases, worst rel err {worst:.2e}, {t:.1?}", reports.len()))
}

fn c64(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
    g.constant(Tensor::from_f64(shape, v).unwrap())
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= tol, format!("{what}: {a} vs {b}"))
}

fn equation_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let mut n = 0;
    // pixel confidence
    for (p, want, tol) in [
        (vec![0.0; 4], 0.5, 0.0),
        (vec![20.0, -20.0, 20.0, -20.0], 1.0, 1e-6),
        (vec![0.0, 20.0, -20.0, 0.0], 0.75, 1e-6),
    ] {
        let v = c64(&mut g, &[1, 1, 2, 2], &p);
        let c = pixel_confidence(&mut g, v).map_err(|e| e.to_string())?;
        close(g.value(c).item(), want, tol, "c_p")?;
        n += 1;
    }
    // combination
    for (ci, cp, want) in [(1.0, 1.0, 1.0), (0.0, 0.5, 0.25), (0.8, 0.9, 0.85)] {
        let (a, b) = (c64(&mut g, &[1], &[ci]), c64(&mut g, &[1], &[cp]));
        let c = combine_confidence(&mut g, a, b).map_err(|e| e.to_string())?;
        close(g.value(c).item(), want, 1e-12, "c")?;
        n += 1;
    }
    // hint mixing, boundaries exact
    let prob = c64(&mut g, &[1, 1, 1, 3], &[0.2, 0.7, 0.01]);
    let y = c64(&mut g, &[1, 1, 1, 3], &[1.0, 0.0, 1.0]);
    let one = c64(&mut g, &[1], &[1.0]);
    let m = hint_mix(&mut g, prob, y, one, &[true]).map_err(|e| e.to_string())?;
    check(g.value(m) == g.value(prob), "c=1 does not return prob")?;
    let floor = c64(&mut g, &[1], &[C_FLOOR]);
    let m = hint_mix(&mut g, prob, y, floor, &[true]).map_err(|e| e.to_string())?;
    check(g.value(m).max_abs_diff(g.value(y)) <= 1e-5, "floor c does not return Y")?;
    let half = c64(&mut g, &[1], &[0.5]);
    let m = hint_mix(&mut g, prob, y, half, &[true]).map_err(|e| e.to_string())?;
    close(g.value(m).data()[0], 0.6, 1e-12, "P'")?;
    n += 3;
    // gates
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    check(!sample_gates(&[1.0; 10_000], GateMode::Confidence, &mut rng, true).contains(&true), "c=1 gated")?;
    let rate = |c: f64, rng: &mut ChaCha8Rng| {
        sample_gates(&vec![c; 10_000], GateMode::Confidence, rng, true).iter().filter(|&&x| x).count() as f64 / 1e4
    };
    let r = rate(C_FLOOR, &mut rng);
    check((0.998..=1.0).contains(&r), format!("floor gate rate {r}"))?;
    let r = rate(0.5, &mut rng);
    check((0.48..=0.52).contains(&r), format!("half gate rate {r}"))?;
    n += 3;
    // confidence loss
    for (c, want, tol) in [(1.0, 0.0, 1e-12), ((-1.0f64).exp(), 1.0, 1e-12), (0.5, 0.693147, 1e-5), (C_FLOOR, 13.8155, 1e-4)] {
        let v = c64(&mut g, &[1], &[c]);
        let l = confidence_loss(&mut g, v).map_err(|e| e.to_string())?;
        close(g.value(l).item(), want, tol, "L_c")?;
        n += 1;
    }
    // segmentation loss
    let y = c64(&mut g, &[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let iou = c64(&mut g, &[1], &[1.0]);
    let l = segmentation_loss(&mut g, y, y, iou, y, None).map_err(|e| e.to_string())?;
    check(g.value(l.ce).item() <= 1e-6, "perfect L_ce")?;
    check(g.value(l.dice).item() <= 1.0 / 5.0, "perfect L_dice")?;
    check(g.value(l.mse).item() <= 1e-12, "perfect L_mse")?;
    let p = c64(&mut g, &[1, 1, 2, 2], &[0.5; 4]);
    let l = segmentation_loss(&mut g, p, y, iou, p, None).map_err(|e| e.to_string())?;
    close(g.value(l.ce).item(), std::f64::consts::LN_2, 1e-6, "half L_ce")?;
    let z = c64(&mut g, &[1, 1, 2, 2], &[0.0; 4]);
    let l = segmentation_loss(&mut g, p, z, iou, p, None).map_err(|e| e.to_string())?;
    close(g.value(l.dice).item(), 2.0 / 3.0, 1e-4, "empty L_dice")?;
    n += 3;
    // total
    let (s, c) = (c64(&mut g, &[1], &[0.6]), c64(&mut g, &[1], &[0.693]));
    let t = total_loss(&mut g, s, c, 1.0).map_err(|e| e.to_string())?;
    close(g.value(t).item(), 1.293, 1e-12, "total")?;
    let t = total_loss(&mut g, s, c, 0.0).map_err(|e| e.to_string())?;
    check(g.value(t).item() == 0.6, "lambda=0 total")?;
    n += 2;
    Ok(format!("{n} examples reproduced"))
}

fn freezing() -> Outcome {
    let cfg = RunConfig::default();
    let data = Dataset::synthetic(&cfg.data.synth, 20, 0, Split::Train, false).map_err(|e| e.to_string())?.0;
    let tc = TrainConfig {
        norm_policy: NormPolicy::NeckOnly,
        ..cfg.train.clone()
    };
    let mut tr = Trainer::new(cfg.model.clone(), tc).map_err(|e| e.to_string())?;
    let start = tr.params.clone();
    for i in 0..10 {
        let idx: Vec<usize> = (0..4).map(|k| (4 * i + k) % 20).collect();
        tr.train_step(&data.batch(&idx).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    }
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (mut frozen, mut frozen_same, mut neck_changed) = (0, 0, 0);
    for (n, p) in start.iter() {
        if !p.group.is_vit() {
            continue;
        }
        let same = bits(&p.value) == bits(tr.params.value(n).unwrap());
        if n.starts_with("vit.neck.ln") {
            neck_changed += !same as usize;
        } else {
            frozen += 1;
            frozen_same += same as usize;
        }
    }
    check(frozen_same == frozen, format!("{} of {frozen} frozen ViT tensors moved", frozen - frozen_same))?;
    check(neck_changed >= 1, "no neck norm parameter changed")?;
    Ok(format!("{frozen}/{frozen} frozen ViT tensors bitwise unchanged, {neck_changed}/4 neck norm tensors changed"))
}

fn end_to_end(r: &Reference) -> Outcome {
    let c = &r.cfg;
    check(c.data.n_train == 300 && c.data.n_val == 50, "default split sizes changed")?;
    check(c.sizes().label_res == 64 && c.sizes().vit_input == 64, "default resolution changed")?;
    check(c.train.max_iters <= 2000, "more than 2000 iterations")?;
    let dice = r.val.mean_dice();
    check(dice >= 0.90, format!("held-out dice {dice:.4}"))?;
    check(r.elapsed <= Duration::from_secs(15 * 60), format!("training took {:?}", r.elapsed))?;
    Ok(format!(
        "held-out dice {dice:.4} iou {:.4} after {} iterations in {:.1?}",
        r.val.mean_iou(),
        r.trainer.iteration,
        r.elapsed
    ))
}

fn anti_collapse(r: &Reference) -> Outcome {
    let min_run = r.history.iter().map(|h| h.mean_c).fold(f64::INFINITY, f64::min);
    check(min_run > 0.05, format!("lambda=1 run: min mean c {min_run:.4}"))?;

    let cfg = RunConfig::default();
    let batch = r.splits.train.batch(&[0, 1, 2, 3]).map_err(|e| e.to_string())?;
    let run = |lambda: f64, gate: GateMode| -> Result<Vec<(f64, f64)>, String> {
        let mut tc = cfg.train.clone();
        tc.upr.lambda = lambda;
        tc.upr.gate = gate;
        let mut tr = Trainer::new(cfg.model.clone(), tc).map_err(|e| e.to_string())?;
        (0..200)
            .map(|_| {
                let s = tr.train_step(&batch).map_err(|e| e.to_string())?;
                Ok((s.report.mean_c(), s.report.mean_ci()))
            })
            .collect()
    };
    let barrier = run(1.0, cfg.train.upr.gate)?;
    let min_fixed = barrier.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
    check(min_fixed > 0.05, format!("lambda=1 fixed batch: min mean c {min_fixed:.4}"))?;

    let free = run(0.0, GateMode::Always)?;
    let c: Vec<f64> = free.iter().map(|x| x.0).collect();
    let rises = c.windows(2).filter(|w| w[1] > w[0]).count();
    let last = c[c.len() - 1];
    let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let summary = format!(
        "lambda=1 min mean c {min_run:.4} (run) / {min_fixed:.4} (fixed batch); lambda=0 forced hints: c {:.4} -> {last:.4}, min {min:.4}, c_i -> {:.4}, {rises}/199 steps rose",
        c[0],
        free[free.len() - 1].1
    );
    check(rises == 0, summary.clone())?;
    Ok(summary)
}

fn calibration(r: &Reference) -> Outcome {
    let c: Vec<f64> = r.val.samples.iter().map(|s| s.c).collect();
    let ci: Vec<f64> = r.val.samples.iter().map(|s| s.c_i).collect();
    let iou: Vec<f64> = r.val.samples.iter().map(|s| s.iou).collect();
    let (rc, rci) = (pearson(&c, &iou), pearson(&ci, &iou));
    let mean_ci = ci.iter().sum::<f64>() / ci.len() as f64;
    let s = format!("pearson(c, iou) {rc:.3}, pearson(c_i, iou) {rci:.3}, mean c_i {mean_ci:.3}");
    check(rc > 0.5, s.clone())?;
    Ok(s)
}

fn frequency(r: &Reference) -> Outcome {
    let idx: Vec<usize> = (0..r.splits.val.len()).collect();
    let batch = r.splits.val.batch(&idx).map_err(|e| e.to_string())?;
    let (vit, cnn) = branch_features(&r.cfg.model, &r.trainer.params, &batch).map_err(|e| e.to_string())?;
    let cmp = compare_branches(&vit, &cnn, None).map_err(|e| e.to_string())?;
    let s = format!(
        "high_freq_gap {:.4}, CNN above ViT in {}/{} top bins",
        cmp.high_freq_gap, cmp.cnn_higher_bins, cmp.top_bins
    );
    check(cmp.high_freq_gap > 0.0 && 2 * cmp.cnn_higher_bins > cmp.top_bins, s.clone())?;
    Ok(s)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<bool> = (0..256).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.random_bool(pb)).collect();
        let (mut inter, mut union, mut na, mut nb) = (0usize, 0usize, 0usize, 0usize);
        for (&x, &y) in a.iter().zip(&b) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
            na += x as usize;
            nb += y as usize;
        }
        let want = if union == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64)
        };
        let t = |m: &[bool]| Tensor::<f32>::from_fn(&[1, 16, 16], |i| if m[i] { 1.0 } else { 0.0 });
        let got = dice_iou(&t(&a), &t(&b)).map_err(|e| e.to_string())?;
        check(got == want, format!("dice_iou {got:?} vs counted {want:?}"))?;
        check(dice_iou_counts(&a, &b) == want, "dice_iou_counts disagrees")?;
        worst = worst.max((got.0 - 2.0 * got.1 / (1.0 + got.1)).abs());
    }
    check(worst <= 1e-12, format!("identity off by {worst:e}"))?;
    Ok(format!("100 pairs exact, identity residual {worst:.1e}"))
}

fn ablation_direction(r: &Reference) -> Outcome {
    let cells = ablation_cells();
    let pick = |name: &str| *cells.iter().find(|c| c.table == "cfa_upr" && c.name == name).unwrap();
    let (full, cfa_off, upr_off) = (pick("cfa+upr"), pick("upr"), pick("cfa"));
    let mut sums = [0.0f64; 3];
    let mut per_seed = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut base = r.cfg.clone();
        base.seed = seed;
        base.train.seed = seed;
        let splits = load_splits(&base).map_err(|e| e.to_string())?;
        let full_cfg = full.apply(&r.cfg, seed);
        let reuse = seed == r.cfg.seed && full_cfg.to_text() == r.cfg.to_text() && full_cfg.train.seed == r.cfg.train.seed;
        let f = if reuse {
            r.ood.mean_dice()
        } else {
            run_cell(&full_cfg, &splits).map_err(|e| e.to_string())?.dice_ood
        };
        let ood = |c: CellResult| c.dice_ood;
        let a = ood(run_cell(&cfa_off.apply(&r.cfg, seed), &splits).map_err(|e| e.to_string())?);
        let u = ood(run_cell(&upr_off.apply(&r.cfg, seed), &splits).map_err(|e| e.to_string())?);
        for (s, v) in sums.iter_mut().zip([f, a, u]) {
            *s += v;
        }
        per_seed.push(format!("seed {seed}: {f:.4}/{a:.4}/{u:.4}"));
    }
    let [f, a, u] = sums.map(|s| s / 3.0);
    let s = format!(
        "OOD dice full {f:.4}, CFA off {a:.4}, UPR off {u:.4} (full/CFA-off/UPR-off {})",
        per_seed.join(", ")
    );
    check(f >= a && f >= u, s.clone())?;
    Ok(s)
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 16;
    cfg.data.n_val = 8;
    cfg.train.max_iters = 12;
    cfg.train.eval_every = 4;
    let run = || -> Result<(Vec<HistoryRow>, Vec<u8>, Vec<u8>), String> {
        let s = load_splits(&cfg).map_err(|e| e.to_string())?;
        let tr = Trainer::new(cfg.model.clone(), cfg.train.clone()).map_err(|e| e.to_string())?;
        let out = fit(tr, &s.train, Some(&s.val), &FitOptions::default()).map_err(|e| e.to_string())?;
        let last = out.trainer.checkpoint(&cfg.to_text()).to_bytes().map_err(|e| e.to_string())?;
        let best = out.best.as_ref().map(|b| b.iteration.to_le_bytes().to_vec()).unwrap_or_default();
        Ok((out.history, last, best))
    };
    let (a, b) = (run()?, run()?);
    let bits = |h: &[HistoryRow]| -> Vec<u64> {
        h.iter()
            .flat_map(|r| {
                let b = &r.breakdown;
                [b.l_ce, b.l_dice, b.l_mse, b.l_s, b.l_c, b.total, r.mean_c, r.dice.unwrap_or(-1.0)]
            })
            .map(f64::to_bits)
            .collect()
    };
    check(bits(&a.0) == bits(&b.0), "loss histories differ")?;
    check(a.1 == b.1, "checkpoints differ")?;
    check(a.2 == b.2, "best iterations differ")?;
    Ok(format!("{} history rows and {}-byte checkpoints identical", a.0.len(), a.1.len()))
}

fn run_one(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let (tag, msg) = match &r {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {n:>2} {tag} {title}: {msg} [{:.1?}]", start.elapsed());
    r.is_ok()
}

fn main() {
    // answer `cargo test -- --list` without running anything
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = Vec::new();
    ok.push(run_one(1, "gradient suite", gradient_suite));
    ok.push(run_one(2, "equation examples", equation_examples));
    ok.push(run_one(3, "freezing", freezing));
    eprintln!("training the default configuration for criteria 4-7 and 9");
    let r = train_reference();
    ok.push(run_one(4, "end-to-end learning", || end_to_end(&r)));
    ok.push(run_one(5, "anti-collapse", || anti_collapse(&r)));
    ok.push(run_one(6, "calibration", || calibration(&r)));
    ok.push(run_one(7, "frequency", || frequency(&r)));
    ok.push(run_one(8, "metric oracle", metric_oracle));
    ok.push(run_one(9, "ablation direction", || ablation_direction(&r)));
    ok.push(run_one(10, "determinism", determinism));
    let passed = ok.iter().filter(|&&x| x).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
