//! Patch sampling, the Adam optimizer and the joint training loop.
//!
//! The joint objective for a cascade is
//! `lnet_loss_weight · BCE(lung) + (λ·WCE + (1−λ)·Dice)(classes)`; the flat
//! model trains on the class term alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::{is_lung, GrayImage, LabelMap, NUM_LABELS};
use crate::losses::{binary_ce_loss, cnet_total_loss, inverse_frequency_weights, LossConfig, OneHotTarget};
use crate::model::HUNetCompound;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f32,
    pub loss: LossConfig,
    /// Replace `loss.class_weights` with inverse class frequencies of the
    /// training set at the start of [`train_model`].
    pub auto_class_weights: bool,
    pub seed: u64,
    pub lnet_loss_weight: f32,
    pub augment_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            patch_size: 32,
            learning_rate: 1e-3,
            loss: LossConfig::uniform(NUM_LABELS),
            auto_class_weights: true,
            seed: 0,
            lnet_loss_weight: 1.0,
            augment_flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(divisor) {
            return Err(Error::config(format!(
                "patch_size {} must be a positive multiple of {divisor}",
                self.patch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.lnet_loss_weight >= 0.0 && self.lnet_loss_weight.is_finite()) {
            return Err(Error::config("lnet_loss_weight must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &HUNetCompound, learning_rate: f32) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to `model.params()[i]`.
    pub fn update(&mut self, model: &mut HUNetCompound, grads: &[&Tensor]) -> Result<()> {
        if grads.len() != self.first.len() || grads.len() != model.params().len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                model.params().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let param = &model.params()[i].value;
            if grad.shape() != param.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {} {:?}",
                    grad.shape(),
                    model.params()[i].name,
                    param.shape()
                )));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let mut next = param.to_vec();
            for (j, (&g, p)) in grad.data().iter().zip(next.iter_mut()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = param.shape().to_vec();
            model.set_param(i, Tensor::new(&shape, next)?)?;
        }
        Ok(())
    }
}

/// Random square crop (and optional fair-coin horizontal flip) applied
/// identically to image and labels.
pub fn sample_patch<R: Rng>(
    image: &GrayImage,
    labels: &LabelMap,
    patch_size: usize,
    flip: bool,
    rng: &mut R,
) -> Result<(GrayImage, LabelMap)> {
    if (image.width, image.height) != (labels.width, labels.height) {
        return Err(Error::dim("image and labels differ in size"));
    }
    if patch_size == 0 || patch_size > image.width || patch_size > image.height {
        return Err(Error::geometry(format!(
            "patch {patch_size} does not fit in {}x{} image",
            image.width, image.height
        )));
    }
    let top = rng.random_range(0..=image.height - patch_size);
    let left = rng.random_range(0..=image.width - patch_size);
    let mirror = flip && rng.random_bool(0.5);
    let mut pixels = Vec::with_capacity(patch_size * patch_size);
    let mut classes = Vec::with_capacity(patch_size * patch_size);
    for row in top..top + patch_size {
        for i in 0..patch_size {
            let col = if mirror { left + patch_size - 1 - i } else { left + i };
            pixels.push(image.pixels[row * image.width + col]);
            classes.push(labels.labels[row * labels.width + col]);
        }
    }
    Ok((
        GrayImage {
            width: patch_size,
            height: patch_size,
            pixels,
        },
        LabelMap {
            width: patch_size,
            height: patch_size,
            labels: classes,
        },
    ))
}

/// Stacked mini-batch ready for the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub target: OneHotTarget,
    pub lung: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[(GrayImage, LabelMap)]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
        let (w, h) = (first.0.width, first.0.height);
        let mut pixels = Vec::with_capacity(pairs.len() * w * h);
        let mut lung = Vec::with_capacity(pairs.len() * w * h);
        for (img, lab) in pairs {
            if (img.width, img.height, lab.width, lab.height) != (w, h, w, h) {
                return Err(Error::dim("batch items differ in size"));
            }
            pixels.extend_from_slice(&img.pixels);
            lung.extend(lab.labels.iter().map(|&l| if is_lung(l) { 1.0 } else { 0.0 }));
        }
        let planes: Vec<&[u8]> = pairs.iter().map(|(_, l)| l.labels.as_slice()).collect();
        let n = pairs.len();
        Ok(Batch {
            images: Tensor::new(&[n, 1, h, w], pixels)?,
            target: OneHotTarget::from_labels(&planes, h, w, NUM_LABELS)?,
            lung: Tensor::new(&[n, 1, h, w], lung)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    /// Zero for the flat model.
    pub lnet: f64,
    pub cnet: f64,
}

/// One forward, one backward and one Adam update. Losses are those computed
/// before the update.
pub fn train_step(
    model: &mut HUNetCompound,
    batch: &Batch,
    optimizer: &mut Adam,
    config: &TrainConfig,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, x)?;
    let cnet = cnet_total_loss(&mut tape, out.classes, &batch.target, &config.loss)?;
    let (total, lnet) = match out.lung {
        Some(lung) => {
            let bce = binary_ce_loss(&mut tape, lung, &batch.lung)?;
            let weighted = tape.scale(bce, config.lnet_loss_weight);
            (tape.add(cnet, weighted)?, Some(bce))
        }
        None => (cnet, None),
    };
    let read = |v| tape.value(v).item().expect("scalar loss") as f64;
    let losses = StepLosses {
        total: read(total),
        lnet: lnet.map_or(0.0, read),
        cnet: read(cnet),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: optimizer.steps() + 1,
        });
    }
    let grads = tape.backward(total)?;
    let param_grads: Vec<&Tensor> = out
        .params
        .iter()
        .map(|&v| grads.get(v).expect("parameters require grad"))
        .collect();
    optimizer.update(model, &param_grads)?;
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub losses: StepLosses,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    /// Mean total loss of each epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.losses.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,total,lnet,cnet\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.step, r.losses.total, r.losses.lnet, r.losses.cnet
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-class pixel counts over a set of label maps.
pub fn class_frequencies<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> [u64; NUM_LABELS] {
    let mut counts = [0u64; NUM_LABELS];
    for map in labels {
        for &l in &map.labels {
            counts[l as usize] += 1;
        }
    }
    counts
}

/// Training RNG stream for a given seed; distinct from the weight-init
/// stream drawn from the same seed.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Runs `config.epochs` epochs of shuffled mini-batches over `samples`.
pub fn train_model(samples: &[Sample], mut model: HUNetCompound, config: &TrainConfig) -> Result<(HUNetCompound, LossTrace)> {
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    config.validate(model.divisor())?;
    let mut config = config.clone();
    if config.auto_class_weights {
        let counts = class_frequencies(samples.iter().map(|s| &s.labels));
        config.loss.class_weights = inverse_frequency_weights(&counts);
    }
    let mut rng = training_rng(config.seed);
    let mut optimizer = Adam::new(&model, config.learning_rate);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    sample_patch(&s.image, &s.labels, config.patch_size, config.augment_flip, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_pairs(&pairs)?;
            let losses = train_step(&mut model, &batch, &mut optimizer, &config)?;
            trace.records.push(LossRecord {
                epoch,
                step: optimizer.steps(),
                losses,
            });
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;

    fn indexed_image(size: usize) -> (GrayImage, LabelMap) {
        let pixels = (0..size * size).map(|i| i as f32).collect();
        (
            GrayImage::new(size, size, pixels).unwrap(),
            LabelMap::new(size, size, (0..size * size).map(|i| (i % 4) as u8).collect()).unwrap(),
        )
    }

    #[test]
    fn full_size_patch_is_identity() {
        let (img, lab) = indexed_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, l) = sample_patch(&img, &lab, 8, false, &mut rng).unwrap();
        assert_eq!(p, img);
        assert_eq!(l, lab);
    }

    #[test]
    fn crop_is_aligned_between_image_and_labels() {
        let (img, lab) = indexed_image(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (p, l) = sample_patch(&img, &lab, 4, true, &mut rng).unwrap();
            for (v, c) in p.pixels.iter().zip(&l.labels) {
                assert_eq!((*v as usize % 4) as u8, *c);
            }
        }
    }

    #[test]
    fn oversized_patch_is_geometry_error() {
        let (img, lab) = indexed_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_patch(&img, &lab, 9, false, &mut rng), Err(Error::Geometry(_))));
    }

    #[test]
    fn flip_mirrors_rows() {
        let (img, lab) = indexed_image(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut saw_flip = false;
        for _ in 0..20 {
            let (p, _) = sample_patch(&img, &lab, 4, true, &mut rng).unwrap();
            if p.pixels[0] == 3.0 {
                saw_flip = true;
                assert_eq!(&p.pixels[..4], &[3.0, 2.0, 1.0, 0.0]);
            } else {
                assert_eq!(p, img);
            }
        }
        assert!(saw_flip);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model =
            HUNetCompound::build(UNetConfig::lung_stage(2, 4), UNetConfig::class_stage(2, 4), 1).unwrap();
        let before = model.params().to_vec();
        let (img, lab) = indexed_image(8);
        let img = GrayImage::new(8, 8, img.pixels.iter().map(|v| v / 64.0).collect()).unwrap();
        let batch = Batch::from_pairs(&[(img, lab)]).unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&model, 0.0);
        let losses = train_step(&mut model, &batch, &mut opt, &config).unwrap();
        assert!(losses.total.is_finite() && losses.lnet > 0.0 && losses.cnet > 0.0);
        assert_eq!(model.params(), &before[..]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn nan_input_reports_step() {
        let mut model =
            HUNetCompound::build(UNetConfig::lung_stage(1, 2), UNetConfig::class_stage(1, 2), 1).unwrap();
        let img = GrayImage::new(4, 4, vec![f32::NAN; 16]).unwrap();
        let lab = LabelMap::filled(4, 4, 1);
        let batch = Batch::from_pairs(&[(img, lab)]).unwrap();
        let mut opt = Adam::new(&model, 1e-3);
        let err = train_step(&mut model, &batch, &mut opt, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1 }));
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let model = HUNetCompound::build(UNetConfig::lung_stage(1, 2), UNetConfig::class_stage(1, 2), 1).unwrap();
        assert!(matches!(train_model(&[], model, &TrainConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn trace_csv_and_means() {
        let s = StepLosses {
            total: 2.0,
            lnet: 0.5,
            cnet: 1.5,
        };
        let trace = LossTrace {
            records: vec![
                LossRecord { epoch: 0, step: 1, losses: s },
                LossRecord {
                    epoch: 0,
                    step: 2,
                    losses: StepLosses { total: 4.0, ..s },
                },
                LossRecord { epoch: 1, step: 3, losses: s },
            ],
        };
        assert_eq!(trace.epoch_means(), vec![3.0, 2.0]);
        let csv = trace.to_csv();
        assert!(csv.starts_with("epoch,step,total,lnet,cnet\n0,1,2,0.5,1.5\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn config_rejects_indivisible_patch() {
        let cfg = TrainConfig {
            patch_size: 20,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(8).is_err());
        assert!(TrainConfig::default().validate(8).is_ok());
    }
}
