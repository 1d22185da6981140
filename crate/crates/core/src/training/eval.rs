//! Inference, per-sample metrics and branch features for a parameter store.

use crate::data_metrics::{dice_iou_counts, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamStore, Session};
use crate::upr;

/// Bilinear upsampling of `[B,1,h,w]` logits onto the label lattice.
pub fn upsample_logits(g: &mut Graph<f32>, logits: Var, side: usize) -> Result<Var> {
    g.resize_bilinear(logits, side, side)
}

#[derive(Clone, Debug)]
pub struct BatchPrediction {
    /// `[B,1,L,L]` foreground probability at label resolution.
    pub prob: Tensor<f32>,
    pub iou_score: Vec<f64>,
    pub c_i: Vec<f64>,
    pub c_p: Vec<f64>,
    pub c: Vec<f64>,
}

impl BatchPrediction {
    /// Binary mask of sample `i` (`prob > 0.5`).
    pub fn mask(&self, i: usize) -> Vec<bool> {
        let n = self.prob.numel() / self.prob.shape()[0];
        self.prob.data()[i * n..(i + 1) * n].iter().map(|&p| p > 0.5).collect()
    }
}

fn check_batch(batch: &Batch) -> Result<usize> {
    let m = batch.mask.shape();
    if m.len() != 4 || m[2] != m[3] {
        return Err(Error::shape(format!("label batch must be [B,1,L,L], got {m:?}")));
    }
    Ok(m[2])
}

/// Forward pass without hints. Labels only set the output resolution.
pub fn predict(cfg: &ModelConfig, params: &ParamStore<f32>, batch: &Batch) -> Result<BatchPrediction> {
    let side = check_batch(batch)?;
    let mut g = Graph::new();
    let mut s = Session::frozen(&mut g, params);
    let vit = s.graph.constant(batch.vit.clone());
    let cnn = s.graph.constant(batch.cnn.clone());
    let out = forward(&mut s, cfg, vit, cnn)?;
    let g = s.graph;
    let logits = upsample_logits(g, out.decoder.logits, side)?;
    let c_p = upr::pixel_confidence(g, logits)?;
    let c_i = upr::image_confidence(g, out.decoder.iou_score)?;
    let c = upr::combine_confidence(g, c_i, c_p)?;
    let prob = g.sigmoid(logits);
    Ok(BatchPrediction {
        prob: g.value(prob).clone(),
        iou_score: g.value(out.decoder.iou_score).to_f64_vec(),
        c_i: g.value(c_i).to_f64_vec(),
        c_p: g.value(c_p).to_f64_vec(),
        c: g.value(c).to_f64_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub dice: f64,
    pub iou: f64,
    pub c: f64,
    pub c_i: f64,
    pub c_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub samples: Vec<SampleEval>,
}

impl EvalSummary {
    fn mean(&self, f: impl Fn(&SampleEval) -> f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_dice(&self) -> f64 {
        self.mean(|s| s.dice)
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean(|s| s.iou)
    }

    pub fn mean_c(&self) -> f64 {
        self.mean(|s| s.c)
    }
}

pub const EVAL_BATCH: usize = 10;

pub fn evaluate(cfg: &ModelConfig, params: &ParamStore<f32>, data: &Dataset) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut samples = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?;
        let pred = predict(cfg, params, &batch)?;
        let n = batch.mask.numel() / chunk.len();
        for (i, _) in chunk.iter().enumerate() {
            let gt: Vec<bool> = batch.mask.data()[i * n..(i + 1) * n].iter().map(|&v| v > 0.5).collect();
            let (dice, iou) = dice_iou_counts(&pred.mask(i), &gt);
            samples.push(SampleEval {
                dice,
                iou,
                c: pred.c[i],
                c_i: pred.c_i[i],
                c_p: pred.c_p[i],
            });
        }
    }
    Ok(EvalSummary { samples })
}

/// ViT post-neck image embedding and CNN final feature, each `[B,C,grid,grid]`.
pub fn branch_features(cfg: &ModelConfig, params: &ParamStore<f32>, batch: &Batch) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new();
    let mut s = Session::frozen(&mut g, params);
    let vit = s.graph.constant(batch.vit.clone());
    let cnn = s.graph.constant(batch.cnn.clone());
    let out = forward(&mut s, cfg, vit, cnn)?;
    let c = out
        .cnn
        .ok_or_else(|| Error::Config("branch features need the CNN branch enabled".into()))?;
    Ok((
        s.graph.value(out.vit.image_embedding).clone(),
        s.graph.value(c.final_feature).clone(),
    ))
}
