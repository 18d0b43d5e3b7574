//! Training objectives, built from tape operations so every loss is
//! differentiable end to end.
//!
//! All losses sum over pixels of the batch rather than averaging; the
//! optimizer's step size absorbs the scale.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped into `[LOG_CLIP, 1 - LOG_CLIP]` before any log.
pub const LOG_CLIP: f32 = 1e-7;

pub const DEFAULT_EPSILON: f32 = 1e-6;
pub const DEFAULT_LAMBDA: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Per-label weights, shared by the Dice and cross-entropy terms.
    pub class_weights: Vec<f32>,
    /// Blend between cross-entropy (1.0) and Dice (0.0).
    pub lambda: f32,
    /// Dice denominator smoothing.
    pub epsilon: f32,
    pub num_labels: usize,
}

impl LossConfig {
    pub fn uniform(num_labels: usize) -> Self {
        LossConfig {
            class_weights: vec![1.0; num_labels],
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            num_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.class_weights.len() != self.num_labels {
            return Err(Error::config(format!(
                "{} class weights given for {} labels",
                self.class_weights.len(),
                self.num_labels
            )));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("class weights must be finite and nonnegative"));
        }
        if !self.class_weights.iter().any(|&w| w > 0.0) {
            return Err(Error::config("at least one class weight must be positive"));
        }
        Ok(())
    }
}

/// Inverse relative class frequency, normalized to mean 1.
///
/// Absent classes are counted as one pixel so their weight stays finite.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f32> {
    let total: u64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| total.max(1) as f64 / c.max(1) as f64)
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| (w / mean) as f32).collect()
}

/// One-hot ground truth `[N, L, H, W]`: exactly one 1 along the label axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget(Tensor);

impl OneHotTarget {
    /// Encodes per-sample label planes (`N` planes of `H·W` class indices).
    pub fn from_labels(labels: &[&[u8]], height: usize, width: usize, num_labels: usize) -> Result<Self> {
        let plane = height * width;
        let n = labels.len();
        let mut data = vec![0.0f32; n * num_labels * plane];
        for (b, map) in labels.iter().enumerate() {
            if map.len() != plane {
                return Err(Error::dim(format!(
                    "label plane {b} has {} pixels, expected {height}x{width}",
                    map.len()
                )));
            }
            for (p, &l) in map.iter().enumerate() {
                let l = l as usize;
                if l >= num_labels {
                    return Err(Error::dim(format!("label {l} at pixel {p} exceeds {num_labels} labels")));
                }
                data[(b * num_labels + l) * plane + p] = 1.0;
            }
        }
        Ok(OneHotTarget(Tensor::from_parts(vec![n, num_labels, height, width], data)))
    }

    /// Wraps an existing tensor after checking the one-hot property.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let [n, l, h, w] = tensor.dims4()?;
        let plane = h * w;
        let d = tensor.data();
        for b in 0..n {
            for p in 0..plane {
                let mut ones = 0;
                for ch in 0..l {
                    match d[(b * l + ch) * plane + p] {
                        v if v == 1.0 => ones += 1,
                        v if v == 0.0 => {}
                        v => return Err(Error::dim(format!("one-hot entry {v} is neither 0 nor 1"))),
                    }
                }
                if ones != 1 {
                    return Err(Error::dim(format!("pixel {p} of sample {b} has {ones} active labels")));
                }
            }
        }
        Ok(OneHotTarget(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_labels(&self) -> usize {
        self.0.shape()[1]
    }
}

fn check_shapes(tape: &Tape, pred: Var, target: &Tensor) -> Result<()> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Per-label Dice losses as an `[L]` vector.
fn dice_per_label(tape: &mut Tape, pred: Var, target: &OneHotTarget, epsilon: f32) -> Result<Var> {
    check_shapes(tape, pred, target.tensor())?;
    let y = tape.constant(target.tensor().clone());
    let overlap = tape.mul(y, pred)?;
    let inter = tape.sum_per_channel(overlap)?;
    let both = tape.add(y, pred)?;
    let denom = tape.sum_per_channel(both)?;
    let denom = tape.add_scalar(denom, epsilon);
    let ratio = tape.div(inter, denom)?;
    let scaled = tape.scale(ratio, -2.0);
    Ok(tape.add_scalar(scaled, 1.0))
}

/// `1 − 2·Σ y_l·ỹ_l / (Σ (y_l + ỹ_l) + ε)` over every pixel of the batch.
pub fn dice_loss_label(tape: &mut Tape, pred: Var, target: &OneHotTarget, label: usize, epsilon: f32) -> Result<Var> {
    if label >= target.num_labels() {
        return Err(Error::dim(format!(
            "label {label} out of range for {} labels",
            target.num_labels()
        )));
    }
    let per_label = dice_per_label(tape, pred, target, epsilon)?;
    tape.pick(per_label, label)
}

pub fn weighted_dice_loss(tape: &mut Tape, pred: Var, target: &OneHotTarget, config: &LossConfig) -> Result<Var> {
    check_label_count(target, config)?;
    let per_label = dice_per_label(tape, pred, target, config.epsilon)?;
    let weights = tape.constant(Tensor::from_parts(vec![config.num_labels], config.class_weights.clone()));
    let weighted = tape.mul(per_label, weights)?;
    Ok(tape.sum(weighted))
}

/// `−Σ_p Σ_l w_l·y_l·ln ỹ_l`, with ỹ clamped away from 0 and 1.
pub fn weighted_ce_loss(tape: &mut Tape, pred: Var, target: &OneHotTarget, config: &LossConfig) -> Result<Var> {
    check_shapes(tape, pred, target.tensor())?;
    check_label_count(target, config)?;
    let [n, l, h, w] = target.tensor().dims4()?;
    let plane = h * w;
    let mut coeff = target.tensor().to_vec();
    for b in 0..n {
        for (ch, &wt) in config.class_weights.iter().enumerate() {
            let start = (b * l + ch) * plane;
            coeff[start..start + plane].iter_mut().for_each(|v| *v *= wt);
        }
    }
    let coeff = tape.constant(Tensor::from_parts(vec![n, l, h, w], coeff));
    let clipped = tape.clamp(pred, LOG_CLIP, 1.0 - LOG_CLIP);
    let logs = tape.ln(clipped);
    let terms = tape.mul(coeff, logs)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -1.0))
}

/// Two-class cross-entropy with unit weights, summed over pixels.
pub fn binary_ce_loss(tape: &mut Tape, pred_lung: Var, target_lung: &Tensor) -> Result<Var> {
    check_shapes(tape, pred_lung, target_lung)?;
    let y = tape.constant(target_lung.clone());
    let not_y = tape.constant(target_lung.map(|v| 1.0 - v));
    let p = tape.clamp(pred_lung, LOG_CLIP, 1.0 - LOG_CLIP);
    let log_p = tape.ln(p);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let log_q = tape.ln(q);
    let pos_terms = tape.mul(y, log_p)?;
    let neg_terms = tape.mul(not_y, log_q)?;
    let both = tape.add(pos_terms, neg_terms)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0))
}

/// `λ·WCE + (1 − λ)·Dice`.
pub fn cnet_total_loss(tape: &mut Tape, pred: Var, target: &OneHotTarget, config: &LossConfig) -> Result<Var> {
    config.validate()?;
    let ce = weighted_ce_loss(tape, pred, target, config)?;
    let dice = weighted_dice_loss(tape, pred, target, config)?;
    let a = tape.scale(ce, config.lambda);
    let b = tape.scale(dice, 1.0 - config.lambda);
    tape.add(a, b)
}

fn check_label_count(target: &OneHotTarget, config: &LossConfig) -> Result<()> {
    if target.num_labels() != config.num_labels {
        return Err(Error::dim(format!(
            "target has {} labels but the loss is configured for {}",
            target.num_labels(),
            config.num_labels
        )));
    }
    Ok(())
}
