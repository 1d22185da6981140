//! Uncertainty-guided prediction regularization.
//!
//! Confidence `c = (c_i + c_p) / 2` combines the clamped IoU-head output with a
//! pixel confidence derived from logit magnitudes. During training a Bernoulli
//! gate decides per sample whether the ground truth is mixed into the
//! prediction as a hint, `P' = c * sigmoid(P) + (1 - c) * Y`. The term
//! `-log(c)` keeps the model from buying a perfect `P'` with `c = 0`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data_metrics::dice_iou_counts;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Lower clamp for the combined confidence.
pub const C_FLOOR: f64 = 1e-6;
/// Probability clamp inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
pub const DICE_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// `gate ~ Bernoulli(1 - c)`.
    Confidence,
    /// `gate ~ Bernoulli(p)` regardless of confidence.
    Fixed(f64),
    /// Every training sample is hinted.
    Always,
    Off,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateMode::Confidence => write!(f, "confidence"),
            GateMode::Fixed(p) => write!(f, "fixed{p}"),
            GateMode::Always => write!(f, "always"),
            GateMode::Off => write!(f, "off"),
        }
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(GateMode::Confidence),
            "always" => Ok(GateMode::Always),
            "off" => Ok(GateMode::Off),
            _ => {
                let p = s
                    .strip_prefix("fixed")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::Config(format!("unknown gate mode '{s}'")))?;
                Ok(GateMode::Fixed(p))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UprConfig {
    pub lambda: f64,
    pub gate: GateMode,
    /// Hint mixing on/off. With hints off the confidence loss is dropped too.
    pub hint: bool,
}

impl Default for UprConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gate: GateMode::Confidence,
            hint: true,
        }
    }
}

impl UprConfig {
    pub fn effective_lambda(&self) -> f64 {
        if self.hint {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceReport {
    pub c_i: Vec<f64>,
    pub c_p: Vec<f64>,
    pub c: Vec<f64>,
    pub gate: Vec<bool>,
}

impl ConfidenceReport {
    pub fn mean_c(&self) -> f64 {
        mean(&self.c)
    }
    pub fn mean_ci(&self) -> f64 {
        mean(&self.c_i)
    }
    pub fn mean_cp(&self) -> f64 {
        mean(&self.c_p)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_mse: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_dice, self.l_mse, self.l_s, self.l_c, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap_or(f64::NAN)
}

fn values_of<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

/// `c_p = 1 - mean_{H,W}(1 - sigmoid(|P|))` per sample; `P: [B,1,H,W]` -> `[B]`.
pub fn pixel_confidence<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    if sh.len() != 4 || sh[1] != 1 {
        return Err(Error::shape(format!("pixel_confidence expects [B,1,H,W], got {sh:?}")));
    }
    if !g.value(logits).all_finite() {
        return Err(Error::NonFinite("logits contain NaN or infinity".into()));
    }
    let a = g.abs(logits);
    let sgm = g.sigmoid(a);
    let u = g.rsub_scalar(T::one(), sgm);
    let mu = g.mean_axes(u, &[1, 2, 3])?;
    let cp = g.rsub_scalar(T::one(), mu);
    g.reshape(cp, &[sh[0]])
}

/// Image-level confidence: IoU-head output `[B,1]` clamped into `[0,1]`, as `[B]`.
pub fn image_confidence<T: Scalar>(g: &mut Graph<T>, iou_score: Var) -> Result<Var> {
    let b = g.shape(iou_score)[0];
    let c = g.clamp(iou_score, T::zero(), T::one());
    g.reshape(c, &[b])
}

/// `clamp((c_i + c_p) / 2, C_FLOOR, 1)`.
pub fn combine_confidence<T: Scalar>(g: &mut Graph<T>, c_i: Var, c_p: Var) -> Result<Var> {
    let s = g.add(c_i, c_p)?;
    let h = g.scale(s, T::of(0.5));
    Ok(g.clamp(h, T::of(C_FLOOR), T::one()))
}

/// Per-sample hint gates. The confidence is used detached; outside training
/// every gate is off.
pub fn sample_gates<R: Rng>(c: &[f64], mode: GateMode, rng: &mut R, training: bool) -> Vec<bool> {
    if !training {
        return vec![false; c.len()];
    }
    c.iter()
        .map(|&ci| match mode {
            GateMode::Off => false,
            GateMode::Always => true,
            GateMode::Fixed(p) => rng.random_bool(p.clamp(0.0, 1.0)),
            GateMode::Confidence => rng.random_bool((1.0 - ci).clamp(0.0, 1.0)),
        })
        .collect()
}

/// `P' = c * prob + (1 - c) * Y` for gated samples, `P' = prob` otherwise.
/// `Y` must be a constant node; `c: [B]`.
pub fn hint_mix<T: Scalar>(g: &mut Graph<T>, prob: Var, target: Var, c: Var, gates: &[bool]) -> Result<Var> {
    let sh = g.shape(prob).to_vec();
    if g.shape(target) != sh.as_slice() {
        return Err(Error::shape(format!(
            "hint target {:?} does not match prediction {sh:?}",
            g.shape(target)
        )));
    }
    if g.requires_grad(target) {
        return Err(Error::invalid("hint target must not require gradients"));
    }
    let b = sh[0];
    if gates.len() != b || g.shape(c) != [b] {
        return Err(Error::shape(format!("need {b} gates and confidences")));
    }
    if !gates.iter().any(|&x| x) {
        return Ok(prob);
    }
    let c4 = g.reshape(c, &[b, 1, 1, 1])?;
    let cp = g.mul(c4, prob)?;
    let one_minus = g.rsub_scalar(T::one(), c4);
    let cy = g.mul(one_minus, target)?;
    let mixed = g.add(cp, cy)?;
    let mask = Tensor::from_fn(&[b, 1, 1, 1], |i| if gates[i] { T::one() } else { T::zero() });
    let keep = mask.map(|m| T::one() - m);
    let mask = g.constant(mask);
    let keep = g.constant(keep);
    let a = g.mul(mask, mixed)?;
    let p = g.mul(keep, prob)?;
    g.add(p, a)
}

/// `mean_b(-log c_b)`.
pub fn confidence_loss<T: Scalar>(g: &mut Graph<T>, c: Var) -> Result<Var> {
    let vals = g.value(c);
    if vals.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::invalid("confidence must be > 0 for -log(c); clamp to the floor first"));
    }
    let l = g.log(c);
    let m = g.mean_all(l);
    Ok(g.scale(m, -T::one()))
}

#[derive(Clone, Copy, Debug)]
pub struct SegLossVars {
    pub ce: Var,
    pub dice: Var,
    pub mse: Var,
    pub seg: Var,
}

fn check_binary<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    if y.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("target mask must be binary"));
    }
    Ok(())
}

/// Realized IoU of `prob > 0.5` against `Y`, per sample.
pub fn realized_iou<T: Scalar>(prob: &Tensor<T>, target: &Tensor<T>) -> Vec<f64> {
    let b = prob.shape()[0];
    let n = prob.numel() / b;
    let half = T::of(0.5);
    (0..b)
        .map(|i| {
            let p = &prob.data()[i * n..(i + 1) * n];
            let y = &target.data()[i * n..(i + 1) * n];
            let pred: Vec<bool> = p.iter().map(|&v| v > half).collect();
            let gt: Vec<bool> = y.iter().map(|&v| v > half).collect();
            dice_iou_counts(&pred, &gt).1
        })
        .collect()
}

/// `L_ce + 0.5 L_dice + L_mse` on `P' [B,1,H,W]`, binary `Y`, and IoU prediction `[B]`.
///
/// The MSE target is the realized IoU of `prob` (binarized at 0.5), treated as a
/// constant; `iou_target` overrides it.
pub fn segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    p_mixed: Var,
    target: Var,
    iou_pred: Var,
    prob: Var,
    iou_target: Option<&[f64]>,
) -> Result<SegLossVars> {
    check_binary(g.value(target))?;
    let sh = g.shape(p_mixed).to_vec();
    if g.shape(target) != sh.as_slice() {
        return Err(Error::shape("segmentation target shape mismatch"));
    }
    let b = sh[0];
    let pc = g.clamp(p_mixed, T::of(PROB_EPS), T::of(1.0 - PROB_EPS));

    let log_p = g.log(pc);
    let one_minus_p = g.rsub_scalar(T::one(), pc);
    let log_q = g.log(one_minus_p);
    let one_minus_y = g.rsub_scalar(T::one(), target);
    let a = g.mul(target, log_p)?;
    let bq = g.mul(one_minus_y, log_q)?;
    let s = g.add(a, bq)?;
    let m = g.mean_all(s);
    let ce = g.scale(m, -T::one());

    let py = g.mul(pc, target)?;
    let inter = g.sum_axes(py, &[1, 2, 3])?;
    let sum_p = g.sum_axes(pc, &[1, 2, 3])?;
    let sum_y = g.sum_axes(target, &[1, 2, 3])?;
    let num = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(num, T::of(DICE_SMOOTH));
    let den = g.add(sum_p, sum_y)?;
    let den = g.add_scalar(den, T::of(DICE_SMOOTH));
    let den_inv = g.recip(den);
    let ratio = g.mul(num, den_inv)?;
    let per = g.rsub_scalar(T::one(), ratio);
    let dice = g.mean_all(per);

    let realized = match iou_target {
        Some(t) => t.to_vec(),
        None => realized_iou(g.value(prob), g.value(target)),
    };
    if realized.len() != b || g.value(iou_pred).numel() != b {
        return Err(Error::shape("IoU prediction / target must have one value per sample"));
    }
    let t = g.constant(Tensor::from_fn(&[b], |i| T::of(realized[i])));
    let ip = g.reshape(iou_pred, &[b])?;
    let diff = g.sub(ip, t)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq);

    let half_dice = g.scale(dice, T::of(DICE_WEIGHT));
    let s1 = g.add(ce, half_dice)?;
    let seg = g.add(s1, mse)?;
    Ok(SegLossVars { ce, dice, mse, seg })
}

/// `L_s + lambda * L_c`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, seg: Var, conf: Var, lambda: f64) -> Result<Var> {
    let w = g.scale(conf, T::of(lambda));
    g.add(seg, w)
}

/// Where hint gates come from for one evaluation of the objective.
pub enum Gates<'a, R> {
    /// Draw from the configured distribution (training) or force off (eval).
    Sample { rng: &'a mut R, training: bool },
    Given(Vec<bool>),
}

#[derive(Clone, Debug)]
pub struct UprOutput {
    pub total: Var,
    pub prob: Var,
    pub mixed: Var,
    pub breakdown: LossBreakdown,
    pub report: ConfidenceReport,
    pub realized_iou: Vec<f64>,
}

/// The full objective from upsampled logits `[B,1,H,W]` and IoU score `[B,1]`.
pub fn objective<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    logits: Var,
    iou_score: Var,
    target: Var,
    cfg: &UprConfig,
    gates: Gates<'_, R>,
    iou_target: Option<&[f64]>,
) -> Result<UprOutput> {
    let c_p = pixel_confidence(g, logits)?;
    let c_i = image_confidence(g, iou_score)?;
    let c = combine_confidence(g, c_i, c_p)?;
    let c_vals = values_of(g, c);
    let gate = match gates {
        Gates::Given(v) => v,
        Gates::Sample { rng, training } => {
            let mode = if cfg.hint { cfg.gate } else { GateMode::Off };
            sample_gates(&c_vals, mode, rng, training)
        }
    };
    let prob = g.sigmoid(logits);
    let mixed = if cfg.hint {
        hint_mix(g, prob, target, c, &gate)?
    } else {
        prob
    };
    let realized = match iou_target {
        Some(t) => t.to_vec(),
        None => realized_iou(g.value(prob), g.value(target)),
    };
    let seg = segmentation_loss(g, mixed, target, iou_score, prob, Some(&realized))?;
    let lc = confidence_loss(g, c)?;
    let lambda = cfg.effective_lambda();
    let total = total_loss(g, seg.seg, lc, lambda)?;
    let breakdown = LossBreakdown {
        l_ce: scalar_of(g, seg.ce),
        l_dice: scalar_of(g, seg.dice),
        l_mse: scalar_of(g, seg.mse),
        l_s: scalar_of(g, seg.seg),
        l_c: scalar_of(g, lc),
        total: scalar_of(g, total),
        lambda,
    };
    let report = ConfidenceReport {
        c_i: values_of(g, c_i),
        c_p: values_of(g, c_p),
        c: c_vals,
        gate,
    };
    Ok(UprOutput {
        total,
        prob,
        mixed,
        breakdown,
        report,
        realized_iou: realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c64(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn pixel_confidence_examples() {
        let mut g = Graph::<f64>::new();
        let p = c64(&mut g, &[1, 1, 2, 2], &[0.0; 4]);
        let c = pixel_confidence(&mut g, p).unwrap();
        assert_eq!(g.value(c).data(), &[0.5]);

        let p = c64(&mut g, &[2, 1, 1, 2], &[20.0, -20.0, 20.0, 20.0]);
        let c = pixel_confidence(&mut g, p).unwrap();
        assert!(g.value(c).data().iter().all(|v| (v - 1.0).abs() < 1e-6));

        let p = c64(&mut g, &[1, 1, 2, 2], &[0.0, 20.0, -20.0, 0.0]);
        let c = pixel_confidence(&mut g, p).unwrap();
        assert!((g.value(c).item() - 0.75).abs() < 1e-6);
    }

    #[test]
    fn pixel_confidence_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let p = c64(&mut g, &[1, 1, 1, 2], &[0.0, f64::NAN]);
        assert!(pixel_confidence(&mut g, p).is_err());
    }

    #[test]
    fn combine_examples() {
        let mut g = Graph::<f64>::new();
        for (ci, cp, want) in [(1.0, 1.0, 1.0), (0.0, 0.5, 0.25), (0.8, 0.9, 0.85)] {
            let a = c64(&mut g, &[1], &[ci]);
            let b = c64(&mut g, &[1], &[cp]);
            let c = combine_confidence(&mut g, a, b).unwrap();
            assert!((g.value(c).item() - want).abs() < 1e-15);
        }
        let a = c64(&mut g, &[1], &[0.0]);
        let b = c64(&mut g, &[1], &[0.0]);
        let c = combine_confidence(&mut g, a, b).unwrap();
        assert_eq!(g.value(c).item(), C_FLOOR);
    }

    #[test]
    fn hint_mix_examples() {
        let mut g = Graph::<f64>::new();
        let prob = c64(&mut g, &[1, 1, 1, 2], &[0.2, 0.7]);
        let y = c64(&mut g, &[1, 1, 1, 2], &[1.0, 0.0]);
        let c = c64(&mut g, &[1], &[1.0]);
        let m = hint_mix(&mut g, prob, y, c, &[true]).unwrap();
        assert_eq!(g.value(m).data(), g.value(prob).data());

        let c = c64(&mut g, &[1], &[C_FLOOR]);
        let m = hint_mix(&mut g, prob, y, c, &[true]).unwrap();
        assert!(g.value(m).max_abs_diff(g.value(y)) <= 1e-5);

        let c = c64(&mut g, &[1], &[0.5]);
        let m = hint_mix(&mut g, prob, y, c, &[true]).unwrap();
        assert!((g.value(m).data()[0] - 0.6).abs() < 1e-15);

        let m = hint_mix(&mut g, prob, y, c, &[false]).unwrap();
        assert_eq!(g.value(m).data(), g.value(prob).data());
    }

    #[test]
    fn hint_mix_leaves_ungated_samples_untouched() {
        let mut g = Graph::<f64>::new();
        let prob = c64(&mut g, &[2, 1, 1, 2], &[0.2, 0.7, 0.3, 0.9]);
        let y = c64(&mut g, &[2, 1, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let c = c64(&mut g, &[2], &[0.5, 0.5]);
        let m = hint_mix(&mut g, prob, y, c, &[false, true]).unwrap();
        let d = g.value(m).data();
        assert_eq!(&d[..2], &[0.2, 0.7]);
        assert!((d[2] - 0.15).abs() < 1e-15 && (d[3] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn hint_target_must_be_constant() {
        let mut g = Graph::<f64>::new();
        let prob = c64(&mut g, &[1, 1, 1, 1], &[0.2]);
        let y = g.leaf(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(), true);
        let c = c64(&mut g, &[1], &[0.5]);
        assert!(hint_mix(&mut g, prob, y, c, &[true]).is_err());
    }

    #[test]
    fn gate_boundaries_and_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = vec![1.0; 10_000];
        assert!(sample_gates(&ones, GateMode::Confidence, &mut rng, true).iter().all(|g| !g));

        let floor = vec![C_FLOOR; 10_000];
        let g = sample_gates(&floor, GateMode::Confidence, &mut rng, true);
        let rate = g.iter().filter(|&&x| x).count() as f64 / 1e4;
        assert!((0.998..=1.0).contains(&rate), "{rate}");

        let half = vec![0.5; 10_000];
        let g = sample_gates(&half, GateMode::Confidence, &mut rng, true);
        let rate = g.iter().filter(|&&x| x).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&rate), "{rate}");

        let g = sample_gates(&half, GateMode::Confidence, &mut rng, false);
        assert!(g.iter().all(|x| !x));
        let g = sample_gates(&half, GateMode::Off, &mut rng, true);
        assert!(g.iter().all(|x| !x));
        let g = sample_gates(&ones, GateMode::Always, &mut rng, true);
        assert!(g.iter().all(|&x| x));
    }

    #[test]
    fn gates_are_seed_deterministic() {
        let c: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let a = sample_gates(&c, GateMode::Confidence, &mut ChaCha8Rng::seed_from_u64(9), true);
        let b = sample_gates(&c, GateMode::Confidence, &mut ChaCha8Rng::seed_from_u64(9), true);
        assert_eq!(a, b);
    }

    #[test]
    fn gate_mode_parsing() {
        assert_eq!("confidence".parse::<GateMode>().unwrap(), GateMode::Confidence);
        assert_eq!("fixed0.5".parse::<GateMode>().unwrap(), GateMode::Fixed(0.5));
        assert_eq!("off".parse::<GateMode>().unwrap(), GateMode::Off);
        assert!("fixed2".parse::<GateMode>().is_err());
        assert!("sometimes".parse::<GateMode>().is_err());
    }

    #[test]
    fn confidence_loss_examples() {
        let mut g = Graph::<f64>::new();
        for (c, want) in [(1.0, 0.0), ((-1.0f64).exp(), 1.0), (0.5, 0.693147)] {
            let v = c64(&mut g, &[1], &[c]);
            let l = confidence_loss(&mut g, v).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-5);
        }
        let v = c64(&mut g, &[1], &[C_FLOOR]);
        let l = confidence_loss(&mut g, v).unwrap();
        assert!((g.value(l).item() - 13.8155).abs() < 1e-4);
        let z = c64(&mut g, &[2], &[0.5, 0.0]);
        assert!(confidence_loss(&mut g, z).is_err());
    }

    #[test]
    fn confidence_loss_strictly_decreasing() {
        let mut g = Graph::<f64>::new();
        let cs: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let mut prev = f64::INFINITY;
        for c in cs {
            let v = c64(&mut g, &[1], &[c]);
            let l = confidence_loss(&mut g, v).unwrap();
            let x = g.value(l).item();
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn segmentation_loss_examples() {
        let mut g = Graph::<f64>::new();
        // perfect prediction
        let y = c64(&mut g, &[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let iou = c64(&mut g, &[1], &[1.0]);
        let l = segmentation_loss(&mut g, y, y, iou, y, None).unwrap();
        assert!(g.value(l.ce).item() <= 1e-6);
        assert!(g.value(l.dice).item() <= 1.0 / (2.0 * 2.0 + 1.0));
        assert!(g.value(l.mse).item() < 1e-12);

        // P' = 0.5, half ones
        let p = c64(&mut g, &[1, 1, 2, 2], &[0.5; 4]);
        let l = segmentation_loss(&mut g, p, y, iou, p, None).unwrap();
        assert!((g.value(l.ce).item() - std::f64::consts::LN_2).abs() < 1e-6);

        // all-zero target: 1 - 1/(2 + 0 + 1)
        let z = c64(&mut g, &[1, 1, 2, 2], &[0.0; 4]);
        let l = segmentation_loss(&mut g, p, z, iou, p, None).unwrap();
        assert!((g.value(l.dice).item() - (1.0 - 1.0 / 3.0)).abs() < 1e-4);
        // realized IoU of an empty prediction vs empty target is 1
        assert!(g.value(l.mse).item() < 1e-12);
        let s = g.value(l.seg).item();
        let parts = g.value(l.ce).item() + 0.5 * g.value(l.dice).item() + g.value(l.mse).item();
        assert!((s - parts).abs() < 1e-12);
    }

    #[test]
    fn segmentation_loss_rejects_non_binary_target() {
        let mut g = Graph::<f64>::new();
        let p = c64(&mut g, &[1, 1, 1, 2], &[0.5, 0.5]);
        let y = c64(&mut g, &[1, 1, 1, 2], &[0.5, 1.0]);
        let iou = c64(&mut g, &[1], &[1.0]);
        assert!(segmentation_loss(&mut g, p, y, iou, p, None).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::<f64>::new();
        let s = c64(&mut g, &[1], &[0.6]);
        let c = c64(&mut g, &[1], &[0.693]);
        let t = total_loss(&mut g, s, c, 1.0).unwrap();
        assert!((g.value(t).item() - 1.293).abs() < 1e-12);
        let t = total_loss(&mut g, s, c, 0.0).unwrap();
        assert_eq!(g.value(t).item(), 0.6);
        let z = c64(&mut g, &[1], &[0.0]);
        let t = total_loss(&mut g, s, z, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 0.6);
    }
}
