//! `asps` command line: train, eval, ablate, gradcheck, synth, analyze.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::compare_branches;
use crate::cfa_decoder::CfaFlags;
use crate::config::RunConfig;
use crate::data_metrics::{manifest_csv, sample_seed, save_pair_png, synth_sample, Dataset, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::grad_suite;
use crate::training::{
    branch_features, checkpoint_config, evaluate, fit, load_params, Checkpoint, FitOptions, NormPolicy, Trainer,
};

#[derive(Parser, Debug)]
#[command(name = "asps", about = "Frozen ViT + CNN branch segmentation with confidence-guided hints")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write checkpoints plus history.csv to out.dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-sample Dice/IoU of a checkpoint as CSV on stdout.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Image folder to evaluate instead of the configured split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic split: val, test or ood.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// CFA x UPR grid plus the CA/Fusion/PE and TN/NN/Hint sub-ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Write synthetic image/mask pairs and a manifest.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        /// Output folder; defaults to out.dir of the --spec config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        ood: bool,
    },
    /// Radial Fourier spectra of the ViT and CNN features, as CSV.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image folder; the synthetic validation split when unset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of samples to average over.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        bins: Option<usize>,
    },
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let emit = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e));
    match cmd {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train(&cfg, resume.as_deref(), err)?;
            emit(out, &summary)?;
        }
        Command::Eval {
            config,
            ckpt,
            data,
            split,
        } => {
            let csv = eval(config.as_deref(), &ckpt, data.as_deref(), &split, err)?;
            emit(out, &csv)?;
        }
        Command::Ablate { config, seeds } => {
            let cfg = RunConfig::load(&config)?;
            let seeds = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad seed '{x}'"))))
                    .collect::<Result<Vec<u64>>>()?,
                None => vec![cfg.seed],
            };
            let rows = run_ablation(&cfg, &seeds, worker_threads())?;
            emit(out, &ablation_csv(&rows))?;
        }
        Command::Gradcheck => {
            let reports = grad_suite::run_suite();
            emit(out, &grad_suite::report_table(&reports))?;
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                let _ = writeln!(err, "{} failed: {}", r.op_name, r.diagnostic.as_deref().unwrap_or(""));
            }
            return Ok(if failed.is_empty() { 0 } else { 1 });
        }
        Command::Synth {
            spec,
            n,
            out: dir,
            split,
            ood,
        } => {
            let cfg = match &spec {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let dir = dir
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("synth needs --out or out.dir".into()))?;
            let rows = synth(&cfg, n, &dir, Split::parse(&split)?, ood)?;
            let _ = writeln!(err, "wrote {} pairs to {}", rows.len(), dir.display());
        }
        Command::Analyze { ckpt, data, n, bins } => {
            let csv = analyze(&ckpt, data.as_deref(), n, bins)?;
            emit(out, &csv)?;
        }
    }
    Ok(0)
}

/// `ASPS_THREADS` if set, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("ASPS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Texture-shifted synthetic split; empty for folder datasets.
    pub ood: Dataset,
}

/// Folder data: the last `n_val` pairs (by name) are held out. Synthetic data:
/// independent train, val and shifted test splits drawn from `seed`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    if let Some(dir) = &d.dir {
        let mut all = Dataset::load_folder(dir, &cfg.sizes())?;
        if all.len() <= d.n_val {
            return Err(Error::Config(format!(
                "{} holds {} pairs, not more than data.n_val = {}",
                dir.display(),
                all.len(),
                d.n_val
            )));
        }
        let val = all.samples.split_off(all.len() - d.n_val);
        return Ok(Splits {
            train: all,
            val: Dataset { samples: val },
            ood: Dataset::default(),
        });
    }
    let (train, _) = Dataset::synthetic(&d.synth, d.n_train, cfg.seed, Split::Train, false)?;
    let (val, _) = Dataset::synthetic(&d.synth, d.n_val, cfg.seed, Split::Val, false)?;
    let (ood, _) = Dataset::synthetic(&cfg.ood_spec(), d.n_test, cfg.seed, Split::Test, true)?;
    Ok(Splits { train, val, ood })
}

fn train(cfg: &RunConfig, resume: Option<&Path>, err: &mut dyn Write) -> Result<String> {
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("train needs out.dir".into()))?;
    let splits = load_splits(cfg)?;
    let trainer = match resume {
        Some(p) => Trainer::from_checkpoint(cfg.model.clone(), cfg.train.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let text = cfg.to_text();
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, &text).map_err(|e| Error::io(&cfg_path, e))?;
    let opts = FitOptions {
        out_dir: Some(out_dir.clone()),
        config_text: text,
        verbose: true,
    };
    let val = (!splits.val.is_empty()).then_some(&splits.val);
    let outcome = fit(trainer, &splits.train, val, &opts)?;
    let mut s = String::from("iteration,held_out_dice,held_out_iou,best_iteration,best_dice\n");
    let (dice, iou) = outcome
        .final_eval
        .as_ref()
        .map_or((f64::NAN, f64::NAN), |e| (e.mean_dice(), e.mean_iou()));
    let (bi, bd) = outcome.best.as_ref().map_or((0, f64::NAN), |b| (b.iteration, b.dice));
    let _ = writeln!(s, "{},{dice},{iou},{bi},{bd}", outcome.trainer.iteration);
    let _ = writeln!(err, "checkpoints and history in {}", out_dir.display());
    Ok(s)
}

/// Model configuration stored in a checkpoint.
pub fn checkpoint_run_config(ck: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(checkpoint_config(&ck.text))
        .map_err(|e| Error::Checkpoint(format!("stored configuration unreadable: {e}")))
}

fn eval(config: Option<&Path>, ckpt: &Path, data: Option<&Path>, split: &str, err: &mut dyn Write) -> Result<String> {
    let ck = Checkpoint::load(ckpt)?;
    let stored = checkpoint_run_config(&ck)?;
    let cfg = match config {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            c.model = stored.model.clone();
            c.data.synth.sizes = stored.data.synth.sizes;
            c.validate()?;
            c
        }
        None => stored.clone(),
    };
    let params = load_params(&cfg.model, &ck)?;
    let data = match data {
        Some(dir) => Dataset::load_folder(dir, &cfg.sizes())?,
        None => {
            let s = load_splits(&cfg)?;
            match split {
                "val" => s.val,
                "test" | "ood" => s.ood,
                "train" => s.train,
                _ => return Err(Error::Config(format!("unknown split '{split}'"))),
            }
        }
    };
    let ev = evaluate(&cfg.model, &params, &data)?;
    let mut s = String::from("index,dice,iou,c,c_i,c_p\n");
    for (i, r) in ev.samples.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", r.dice, r.iou, r.c, r.c_i, r.c_p);
    }
    let _ = writeln!(err, "mean dice {:.6} mean iou {:.6} over {} samples", ev.mean_dice(), ev.mean_iou(), ev.samples.len());
    Ok(s)
}

/// Render `n` pairs into `dir/images`, `dir/masks` and `dir/manifest.csv`.
pub fn synth(cfg: &RunConfig, n: usize, dir: &Path, split: Split, ood: bool) -> Result<Vec<ManifestRow>> {
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let spec = if ood { cfg.ood_spec() } else { cfg.data.synth.clone() };
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let seed = sample_seed(cfg.seed, split, ood, i);
        let pair = synth_sample(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let name = format!("{i:04}.png");
        save_pair_png(&pair, &img_dir.join(&name), &mask_dir.join(&name))?;
        rows.push(ManifestRow { seed, split, ood });
    }
    let m = dir.join("manifest.csv");
    fs::write(&m, manifest_csv(&rows)).map_err(|e| Error::io(&m, e))?;
    Ok(rows)
}

fn analyze(ckpt: &Path, data: Option<&Path>, n: usize, bins: Option<usize>) -> Result<String> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = checkpoint_run_config(&ck)?;
    let params = load_params(&cfg.model, &ck)?;
    let ds = match data {
        Some(d) => Dataset::load_folder(d, &cfg.sizes())?,
        None => load_splits(&cfg)?.val,
    };
    let idx: Vec<usize> = (0..ds.len().min(n.max(1))).collect();
    let batch = ds.batch(&idx)?;
    let (vit, cnn) = branch_features(&cfg.model, &params, &batch)?;
    Ok(compare_branches(&vit, &cnn, bins)?.to_csv())
}

/// One ablation cell: which mechanisms are switched on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub table: &'static str,
    pub name: &'static str,
    pub cfa: CfaFlags,
    pub norm_policy: NormPolicy,
    pub hint: bool,
}

const fn flags(cross_attention: bool, fusion: bool, pe_replace: bool) -> CfaFlags {
    CfaFlags {
        cross_attention,
        fusion,
        pe_replace,
    }
}

/// Thirteen rows: the 2x2 CFA/UPR grid, the CA/Fusion/PE build-up with UPR on,
/// and the TN/NN/Hint variants with CFA on.
pub fn ablation_cells() -> Vec<AblationCell> {
    use NormPolicy::*;
    let cell = |table, name, cfa, norm_policy, hint| AblationCell {
        table,
        name,
        cfa,
        norm_policy,
        hint,
    };
    let (all, none) = (CfaFlags::ALL, CfaFlags::NONE);
    vec![
        cell("cfa_upr", "baseline", none, None, false),
        cell("cfa_upr", "cfa", all, None, false),
        cell("cfa_upr", "upr", none, NeckOnly, true),
        cell("cfa_upr", "cfa+upr", all, NeckOnly, true),
        cell("ca_fusion_pe", "upr", none, NeckOnly, true),
        cell("ca_fusion_pe", "ca", flags(true, false, false), NeckOnly, true),
        cell("ca_fusion_pe", "ca+fusion", flags(true, true, false), NeckOnly, true),
        cell("ca_fusion_pe", "ca+fusion+pe", all, NeckOnly, true),
        cell("tn_nn_hint", "cfa", all, None, false),
        cell("tn_nn_hint", "cfa+tn", all, BlockNormsOnly, false),
        cell("tn_nn_hint", "cfa+nn", all, NeckOnly, false),
        cell("tn_nn_hint", "cfa+tn+nn", all, Both, false),
        cell("tn_nn_hint", "cfa+nn+hint", all, NeckOnly, true),
    ]
}

impl AblationCell {
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.with_cfa(self.cfa);
        c.seed = seed;
        c.train.seed = seed;
        c.train.norm_policy = self.norm_policy;
        c.train.upr.hint = self.hint;
        c
    }

    fn key(&self) -> (bool, bool, bool, &'static str, bool) {
        (
            self.cfa.cross_attention,
            self.cfa.fusion,
            self.cfa.pe_replace,
            self.norm_policy.as_str(),
            self.hint,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub dice_val: f64,
    pub iou_val: f64,
    pub dice_ood: f64,
    pub iou_ood: f64,
}

/// Train one cell on the given splits and score it on the held-out and shifted splits.
pub fn run_cell(cfg: &RunConfig, splits: &Splits) -> Result<CellResult> {
    let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    let outcome = fit(trainer, &splits.train, None, &FitOptions::default())?;
    let t = &outcome.trainer;
    let val = evaluate(&cfg.model, &t.params, &splits.val)?;
    let ood = if splits.ood.is_empty() {
        None
    } else {
        Some(evaluate(&cfg.model, &t.params, &splits.ood)?)
    };
    Ok(CellResult {
        dice_val: val.mean_dice(),
        iou_val: val.mean_iou(),
        dice_ood: ood.as_ref().map_or(f64::NAN, |e| e.mean_dice()),
        iou_ood: ood.as_ref().map_or(f64::NAN, |e| e.mean_iou()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: usize,
    /// Seed-averaged scores.
    pub mean: CellResult,
}

/// Run `jobs` on up to `threads` workers, preserving order.
pub fn parallel_map<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Every cell for every seed. Cells with identical switches are trained once
/// per seed and share their result. All cells see the same data per seed.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], threads: usize) -> Result<Vec<AblationRow>> {
    let cells = ablation_cells();
    let mut unique: Vec<AblationCell> = Vec::new();
    for c in &cells {
        if !unique.iter().any(|u| u.key() == c.key()) {
            unique.push(*c);
        }
    }
    let splits: Vec<Splits> = seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            load_splits(&c)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..unique.len())
        .flat_map(|u| (0..seeds.len()).map(move |s| (u, s)))
        .collect();
    let results = parallel_map(&jobs, threads, |&(u, s)| {
        run_cell(&unique[u].apply(base, seeds[s]), &splits[s])
    });
    let mut sums: BTreeMap<usize, Vec<CellResult>> = BTreeMap::new();
    for (&(u, _), r) in jobs.iter().zip(results) {
        sums.entry(u).or_default().push(r?);
    }
    Ok(cells
        .iter()
        .map(|c| {
            let u = unique.iter().position(|x| x.key() == c.key()).expect("cell deduplicated");
            let rs = &sums[&u];
            let avg = |f: fn(&CellResult) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
            AblationRow {
                cell: *c,
                seeds: rs.len(),
                mean: CellResult {
                    dice_val: avg(|r| r.dice_val),
                    iou_val: avg(|r| r.iou_val),
                    dice_ood: avg(|r| r.dice_ood),
                    iou_ood: avg(|r| r.iou_ood),
                },
            }
        })
        .collect())
}

pub const ABLATION_HEADER: &str = "table,cell,ca,fusion,pe,tn,nn,hint,seeds,dice_val,iou_val,dice_ood,iou_ood";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let b = |x: bool| x as u8;
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let c = &r.cell;
        let tn = matches!(c.norm_policy, NormPolicy::BlockNormsOnly | NormPolicy::Both);
        let nn = matches!(c.norm_policy, NormPolicy::NeckOnly | NormPolicy::Both);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.table,
            c.name,
            b(c.cfa.cross_attention),
            b(c.cfa.fusion),
            b(c.cfa.pe_replace),
            b(tn),
            b(nn),
            b(c.hint),
            r.seeds,
            r.mean.dice_val,
            r.mean.iou_val,
            r.mean.dice_ood,
            r.mean.iou_ood
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirteen_cells_in_table_order() {
        let cells = ablation_cells();
        let count = |t: &str| cells.iter().filter(|c| c.table == t).count();
        assert_eq!((count("cfa_upr"), count("ca_fusion_pe"), count("tn_nn_hint")), (4, 4, 5));
        assert_eq!(cells.len(), 13);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let jobs: Vec<u32> = (0..17).collect();
        assert_eq!(parallel_map(&jobs, 4, |x| x * 2), jobs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn config_errors_exit_with_two() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["asps", "frobnicate"], &mut o, &mut e), 2);
        assert_eq!(run(["asps", "train", "--config", "/nonexistent/cfg"], &mut o, &mut e), 1);
    }
}
