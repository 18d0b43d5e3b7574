//! Independently seeded ensembles, soft-map averaging and entropy.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::{is_pathology, GrayImage, LabelMap, SoftSegmentation};
use crate::model::{load_checkpoint, HUNetCompound, UNetConfig};
use crate::tensor::Tensor;
use crate::training::{train_model, LossTrace, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub k: usize,
    pub base_seed: u64,
    pub train: TrainConfig,
    /// `None` trains flat class networks without the lung stage.
    pub lnet: Option<UNetConfig>,
    pub cnet: UNetConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 6,
            base_seed: 0,
            train: TrainConfig::default(),
            lnet: Some(UNetConfig::lung_stage(3, 8)),
            cnet: UNetConfig::class_stage(3, 8),
        }
    }
}

impl EnsembleConfig {
    pub fn member_seed(&self, member: usize) -> u64 {
        self.base_seed.wrapping_add(member as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("ensemble size k must be at least 1"));
        }
        Ok(())
    }

    /// Untrained model of member `member`.
    pub fn build_member(&self, member: usize) -> Result<HUNetCompound> {
        let seed = self.member_seed(member);
        match self.lnet {
            Some(lnet) => HUNetCompound::build(lnet, self.cnet, seed),
            None => HUNetCompound::build_flat(
                UNetConfig {
                    in_channels: 1,
                    ..self.cnet
                },
                seed,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedMember {
    pub model: HUNetCompound,
    pub trace: LossTrace,
}

fn train_member(samples: &[Sample], config: &EnsembleConfig, member: usize) -> Result<TrainedMember> {
    let run = || {
        let model = config.build_member(member)?;
        let train = TrainConfig {
            seed: config.member_seed(member),
            ..config.train.clone()
        };
        let (model, trace) = train_model(samples, model, &train)?;
        Ok(TrainedMember { model, trace })
    };
    run().map_err(|e| Error::Member {
        member,
        source: Box::new(e),
    })
}

/// Trains `config.k` members, at most `jobs` at a time. Results are in
/// member order and do not depend on `jobs`.
pub fn train_ensemble(samples: &[Sample], config: &EnsembleConfig, jobs: usize) -> Result<Vec<TrainedMember>> {
    config.validate()?;
    if jobs <= 1 {
        return (0..config.k).map(|m| train_member(samples, config, m)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.min(config.k))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..config.k)
            .into_par_iter()
            .map(|m| train_member(samples, config, m))
            .collect()
    })
}

/// Checkpoint file name of member `member`.
pub fn member_file_name(member: usize) -> String {
    format!("member_{member}.hseg")
}

/// Checkpoints `member_<k>.hseg` in `dir`, sorted by member index.
pub fn member_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let index = name
            .strip_prefix("member_")
            .and_then(|rest| rest.strip_suffix(".hseg"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(index) = index {
            found.push((index, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Loads every member checkpoint in `dir`; an empty directory is a usage error.
pub fn load_members(dir: impl AsRef<Path>) -> Result<Vec<HUNetCompound>> {
    let dir = dir.as_ref();
    let paths = member_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("no member_<k>.hseg checkpoints in {}", dir.display())));
    }
    paths.iter().map(load_checkpoint).collect()
}

/// Consensus of an ensemble on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub classes: SoftSegmentation,
    /// Mean lung probability `[H·W]`, when every member has a lung stage.
    pub lung: Option<Vec<f32>>,
}

/// Soft outputs of each member on one image, in member order.
pub fn member_outputs(models: &[HUNetCompound], image: &GrayImage) -> Result<Vec<(Option<Tensor>, Tensor)>> {
    if models.is_empty() {
        return Err(Error::Ensemble("no members".into()));
    }
    let x = image.to_tensor();
    models.iter().map(|m| m.predict(&x)).collect()
}

/// Elementwise mean, summed in member order.
pub fn average(outputs: &[(Option<Tensor>, Tensor)]) -> Result<EnsemblePrediction> {
    let (first_lung, first) = outputs.first().ok_or_else(|| Error::Ensemble("no members".into()))?;
    let k = outputs.len() as f32;
    let mut sum = vec![0.0f32; first.numel()];
    let mut lung_sum = first_lung.as_ref().map(|t| vec![0.0f32; t.numel()]);
    for (m, (lung, classes)) in outputs.iter().enumerate() {
        if classes.shape() != first.shape() {
            return Err(Error::Ensemble(format!(
                "member {m} predicts {:?}, member 0 predicts {:?}",
                classes.shape(),
                first.shape()
            )));
        }
        for (s, v) in sum.iter_mut().zip(classes.data()) {
            *s += v;
        }
        match (&mut lung_sum, lung) {
            (Some(acc), Some(l)) if l.numel() == acc.len() => {
                for (s, v) in acc.iter_mut().zip(l.data()) {
                    *s += v;
                }
            }
            (None, None) => {}
            _ => return Err(Error::Ensemble(format!("member {m} disagrees with member 0 on the lung stage"))),
        }
    }
    for s in &mut sum {
        *s /= k;
    }
    let classes = Tensor::new(first.shape(), sum)?;
    Ok(EnsemblePrediction {
        classes: SoftSegmentation::from_batch_tensor(&classes)?,
        lung: lung_sum.map(|v| v.into_iter().map(|s| s / k).collect()),
    })
}

pub fn ensemble_predict(models: &[HUNetCompound], image: &GrayImage) -> Result<EnsemblePrediction> {
    average(&member_outputs(models, image)?)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn hard_labels(soft: &SoftSegmentation) -> LabelMap {
    let labels = (0..soft.plane())
        .map(|p| {
            let mut best = 0;
            for l in 1..soft.num_labels {
                if soft.prob(l, p) > soft.prob(best, p) {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        width: soft.width,
        height: soft.height,
        labels,
    }
}

fn entropy(soft: &SoftSegmentation, p: usize) -> f64 {
    (0..soft.num_labels)
        .map(|l| soft.prob(l, p) as f64)
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum()
}

/// Shannon entropy in nats at every pixel, shaped `[H, W]`.
pub fn uncertainty_map(soft: &SoftSegmentation) -> Tensor {
    let data = (0..soft.plane()).map(|p| entropy(soft, p) as f32).collect();
    Tensor::new(&[soft.height, soft.width], data).expect("plane sized")
}

/// Mean entropy over pixels labelled GGO or CON in `labels`, 0 when none are.
pub fn slice_uncertainty(soft: &SoftSegmentation, labels: &LabelMap) -> Result<f64> {
    if (soft.width, soft.height) != (labels.width, labels.height) {
        return Err(Error::dim(format!(
            "soft map {}x{} but labels {}x{}",
            soft.width, soft.height, labels.width, labels.height
        )));
    }
    let (mut total, mut n) = (0.0, 0usize);
    for (p, &l) in labels.labels.iter().enumerate() {
        if is_pathology(l) {
            total += entropy(soft, p);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
