//! Freezing policy, training step, training loop and checkpoints.

mod checkpoint;
mod eval;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use eval::{
    branch_features, evaluate, predict, upsample_logits, BatchPrediction, EvalSummary, SampleEval, EVAL_BATCH,
};
pub use optim::{global_norm, AdamW};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_metrics::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::numerics::{Graph, Tensor};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::upr::{self, ConfidenceReport, Gates, LossBreakdown, UprConfig};

/// Which ViT layernorms are fine-tuned. Everything else in the ViT stays frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPolicy {
    NeckOnly,
    BlockNormsOnly,
    Both,
    None,
}

impl NormPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            NormPolicy::NeckOnly => "neck_only",
            NormPolicy::BlockNormsOnly => "block_norms_only",
            NormPolicy::Both => "both",
            NormPolicy::None => "none",
        }
    }

    fn includes(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::VitFrozen => false,
            ParamGroup::VitNeckNorm => matches!(self, NormPolicy::NeckOnly | NormPolicy::Both),
            ParamGroup::VitBlockNorm => matches!(self, NormPolicy::BlockNormsOnly | NormPolicy::Both),
            ParamGroup::Cnn | ParamGroup::Decoder => true,
        }
    }
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neck_only" => Ok(NormPolicy::NeckOnly),
            "block_norms_only" => Ok(NormPolicy::BlockNormsOnly),
            "both" => Ok(NormPolicy::Both),
            "none" => Ok(NormPolicy::None),
            _ => Err(Error::Config(format!("unknown norm policy '{s}'"))),
        }
    }
}

pub fn build_trainable_set<T: crate::numerics::Scalar>(params: &ParamStore<T>, policy: NormPolicy) -> BTreeSet<String> {
    params
        .iter()
        .filter(|(_, p)| policy.includes(p.group))
        .map(|(n, _)| n.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub norm_policy: NormPolicy,
    /// Held-out evaluation period in iterations; the last iteration is always evaluated.
    pub eval_every: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Carries `lambda`, the gate distribution and the hint switch.
    pub upr: UprConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            max_iters: 2000,
            seed: 0,
            norm_policy: NormPolicy::NeckOnly,
            eval_every: 250,
            grad_clip: Some(1.0),
            upr: UprConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, max_iters and eval_every must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if !(self.upr.lambda >= 0.0) {
            return Err(Error::Config("upr.lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub report: ConfidenceReport,
    pub grad_norm: f64,
}

/// Sample indices of iteration `iter` (0-based): a seeded permutation per
/// epoch, consumed in order, so the order depends only on `(seed, iter)`.
pub fn batch_indices(seed: u64, iter: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = (n / batch_size).max(1);
    let (epoch, k) = (iter / per_epoch, iter % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    (0..batch_size).map(|j| perm[(k * batch_size + j) % n]).collect()
}

/// Model parameters, optimizer state and the hint rng.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub trainable: BTreeSet<String>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.init_params::<f32>(cfg.seed)?;
        Ok(Self::with_params(model, cfg, params))
    }

    pub fn with_params(model: ModelConfig, cfg: TrainConfig, params: ParamStore<f32>) -> Self {
        let trainable = build_trainable_set(&params, cfg.norm_policy);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            model,
            cfg,
            params,
            trainable,
            opt: AdamW::default(),
            rng,
            iteration: 0,
        }
    }

    /// Forward, UPR objective, backward and one AdamW update. On failure the
    /// parameters, optimizer and rng are left untouched.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let side = batch.mask.shape()[2];
        let mut rng = self.rng.clone();
        let mut g = Graph::<f32>::new();
        let (out, grads) = {
            let mut s = Session::training(&mut g, &self.params, &self.trainable);
            let vit = s.graph.constant(batch.vit.clone());
            let cnn = s.graph.constant(batch.cnn.clone());
            let o = forward(&mut s, &self.model, vit, cnn)?;
            let logits = upsample_logits(s.graph, o.decoder.logits, side)?;
            let target = s.graph.constant(batch.mask.clone());
            let u = upr::objective(
                s.graph,
                logits,
                o.decoder.iou_score,
                target,
                &self.cfg.upr,
                Gates::Sample {
                    rng: &mut rng,
                    training: true,
                },
                None,
            )?;
            if !u.breakdown.is_finite() {
                return Err(Error::NonFinite(format!(
                    "iteration {}: non-finite loss {:?}",
                    self.iteration + 1,
                    u.breakdown
                )));
            }
            let grads = s.graph.backward(u.total)?;
            (u, s.param_grads(&grads))
        };
        let grad_norm = self
            .opt
            .step(&mut self.params, &grads, self.cfg.lr, self.cfg.weight_decay, self.cfg.grad_clip)
            .map_err(|e| Error::NonFinite(format!("iteration {}: {e}", self.iteration + 1)))?;
        self.rng = rng;
        self.iteration += 1;
        Ok(StepOutput {
            breakdown: out.breakdown,
            report: out.report,
            grad_norm,
        })
    }

    /// Serialize parameters, optimizer moments, rng position and `config_text`.
    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
        for (prefix, moments) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (name, buf) in moments {
                let shape = self.params.value(name).map(|t| t.shape().to_vec()).unwrap_or(vec![buf.len()]);
                tensors.push((
                    format!("{prefix}{name}"),
                    Tensor::new(&shape, buf.clone()).expect("moment buffers match their parameter"),
                ));
            }
        }
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let state = format!(
            "{STATE_MARKER}\niteration={}\nrng.seed={seed}\nrng.stream={}\nrng.word_pos={}\nadam.t={}\n",
            self.iteration,
            self.rng.get_stream(),
            self.rng.get_word_pos(),
            self.opt.t
        );
        Checkpoint {
            tensors,
            text: format!("{}\n{state}", config_text.trim_end()),
        }
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    /// Parameter groups come from a fresh initialization of `model`.
    pub fn from_checkpoint(model: ModelConfig, cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let mut params = model.init_params::<f32>(cfg.seed)?;
        let names: Vec<String> = params.names().cloned().collect();
        for name in &names {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let dst = params.value_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        for (n, _) in &ck.tensors {
            if !n.starts_with("adam.") && !params.contains(n) {
                return Err(Error::Checkpoint(format!("unexpected entry {n}")));
            }
        }
        let mut tr = Self::with_params(model, cfg, params);
        let state = checkpoint_state(&ck.text)?;
        let get = |k: &str| {
            state
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint state lacks {k}")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("malformed checkpoint state {k}"));
        tr.iteration = get("iteration")?.parse().map_err(|_| bad("iteration"))?;
        tr.opt.t = get("adam.t")?.parse().map_err(|_| bad("adam.t"))?;
        let hex = get("rng.seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(bad("rng.seed"));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(get("rng.stream")?.parse().map_err(|_| bad("rng.stream"))?);
        rng.set_word_pos(get("rng.word_pos")?.parse().map_err(|_| bad("rng.word_pos"))?);
        tr.rng = rng;
        for (n, t) in &ck.tensors {
            if let Some(p) = n.strip_prefix("adam.m.") {
                tr.opt.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = n.strip_prefix("adam.v.") {
                tr.opt.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(tr)
    }
}

const STATE_MARKER: &str = "[state]";

/// The configuration part of a checkpoint's text block.
pub fn checkpoint_config(text: &str) -> &str {
    match text.find(STATE_MARKER) {
        Some(i) => &text[..i],
        None => text,
    }
}

fn checkpoint_state(text: &str) -> Result<BTreeMap<String, String>> {
    let i = text
        .find(STATE_MARKER)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
    Ok(text[i + STATE_MARKER.len()..]
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Model configuration and parameters only, for evaluation.
pub fn load_params(model: &ModelConfig, ck: &Checkpoint) -> Result<ParamStore<f32>> {
    let mut params = model.init_params::<f32>(0)?;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let t = ck
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let dst = params.value_mut(name)?;
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("parameter {name} shape mismatch")));
        }
        *dst = t.clone();
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// 1-based iteration.
    pub iter: usize,
    pub breakdown: LossBreakdown,
    pub mean_c: f64,
    pub mean_ci: f64,
    pub mean_cp: f64,
    /// Held-out metrics, present on evaluation iterations.
    pub dice: Option<f64>,
    pub iou: Option<f64>,
}

pub const HISTORY_HEADER: &str = "iter,L_ce,L_dice,L_mse,L_s,L_c,total,mean_c,mean_ci,mean_cp,dice,iou";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let b = &r.breakdown;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            b.l_ce,
            b.l_dice,
            b.l_mse,
            b.l_s,
            b.l_c,
            b.total,
            r.mean_c,
            r.mean_ci,
            r.mean_cp,
            opt(r.dice),
            opt(r.iou)
        ));
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where `final.ckpt`, `best.ckpt` and `history.csv` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stored verbatim in checkpoints.
    pub config_text: String,
    /// Print one progress line per evaluation to standard error.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct BestRecord {
    pub iteration: usize,
    pub dice: f64,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub history: Vec<HistoryRow>,
    pub best: Option<BestRecord>,
    pub final_eval: Option<EvalSummary>,
}

fn write_history(dir: &Path, rows: &[HistoryRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("history.csv");
    fs::write(&p, history_csv(rows)).map_err(|e| Error::io(&p, e))
}

/// Train from the trainer's current iteration up to `cfg.max_iters`.
pub fn fit(mut trainer: Trainer, train: &Dataset, val: Option<&Dataset>, opts: &FitOptions) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let cfg = trainer.cfg.clone();
    let mut history = Vec::new();
    let mut best: Option<BestRecord> = None;
    let mut final_eval = None;
    while trainer.iteration < cfg.max_iters {
        let idx = batch_indices(cfg.seed, trainer.iteration, train.len(), cfg.batch_size);
        let step = train.batch(&idx).and_then(|b| trainer.train_step(&b));
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                if let Some(dir) = &opts.out_dir {
                    write_history(dir, &history)?;
                }
                return Err(e);
            }
        };
        let it = trainer.iteration;
        let mut row = HistoryRow {
            iter: it,
            breakdown: step.breakdown,
            mean_c: step.report.mean_c(),
            mean_ci: step.report.mean_ci(),
            mean_cp: step.report.mean_cp(),
            dice: None,
            iou: None,
        };
        if let Some(v) = val.filter(|_| it % cfg.eval_every == 0 || it == cfg.max_iters) {
            let ev = evaluate(&trainer.model, &trainer.params, v)?;
            row.dice = Some(ev.mean_dice());
            row.iou = Some(ev.mean_iou());
            if opts.verbose {
                eprintln!(
                    "iter {it}: total {:.4} mean_c {:.3} held-out dice {:.4} iou {:.4}",
                    row.breakdown.total,
                    row.mean_c,
                    ev.mean_dice(),
                    ev.mean_iou()
                );
            }
            if best.as_ref().is_none_or(|b| ev.mean_dice() > b.dice) {
                best = Some(BestRecord {
                    iteration: it,
                    dice: ev.mean_dice(),
                    params: trainer.params.clone(),
                });
                if let Some(dir) = &opts.out_dir {
                    trainer.checkpoint(&opts.config_text).save(&dir.join("best.ckpt"))?;
                }
            }
            if it == cfg.max_iters {
                final_eval = Some(ev);
            }
        }
        history.push(row);
    }
    if let Some(dir) = &opts.out_dir {
        write_history(dir, &history)?;
        trainer.checkpoint(&opts.config_text).save(&dir.join("final.ckpt"))?;
    }
    Ok(FitOutcome {
        trainer,
        history,
        best,
        final_eval,
    })
}
