//! In-memory image, label-map and soft-segmentation types.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NON_LUNG: u8 = 0;
pub const HEALTHY: u8 = 1;
pub const GGO: u8 = 2;
pub const CON: u8 = 3;
pub const NUM_LABELS: usize = 4;

pub fn is_pathology(label: u8) -> bool {
    label == GGO || label == CON
}

pub fn is_lung(label: u8) -> bool {
    label != NON_LUNG
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// `[1, 1, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.pixels.clone())
    }
}

/// Per-pixel class map over {non-lung, healthy, GGO, CON}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} label map needs {} pixels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_LABELS) {
            return Err(Error::dim(format!("label {} at pixel {i} is not a class", labels[i])));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        assert!((label as usize) < NUM_LABELS);
        LabelMap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dim(format!(
                "label maps {}x{} and {}x{} differ",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel distribution over `L` classes, stored `[L, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSegmentation {
    pub num_labels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SoftSegmentation {
    pub fn new(num_labels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_labels * height * width {
            return Err(Error::dim(format!(
                "[{num_labels},{height},{width}] soft map needs {} values, got {}",
                num_labels * height * width,
                data.len()
            )));
        }
        Ok(SoftSegmentation {
            num_labels,
            height,
            width,
            data,
        })
    }

    /// Takes the single item of an `[1, L, H, W]` network output.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Self> {
        let [n, l, h, w] = t.dims4()?;
        if n != 1 {
            return Err(Error::dim(format!("expected a batch of one, got {:?}", t.shape())));
        }
        Self::new(l, h, w, t.to_vec())
    }

    pub fn one_hot(labels: &LabelMap, num_labels: usize) -> Self {
        let plane = labels.width * labels.height;
        let mut data = vec![0.0; num_labels * plane];
        for (p, &l) in labels.labels.iter().enumerate() {
            data[l as usize * plane + p] = 1.0;
        }
        SoftSegmentation {
            num_labels,
            height: labels.height,
            width: labels.width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, label: usize, pixel: usize) -> f32 {
        self.data[label * self.plane() + pixel]
    }

    /// Distribution at one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<f32> {
        (0..self.num_labels).map(|l| self.prob(l, pixel)).collect()
    }

    /// Entries in `[0, 1]` and channel sums within `tol` of 1.
    pub fn validate(&self, tol: f32) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::dim(format!("soft map entry {i} = {} outside [0,1]", self.data[i])));
        }
        for p in 0..self.plane() {
            let s: f32 = (0..self.num_labels).map(|l| self.prob(l, p)).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::dim(format!("soft map pixel {p} sums to {s}")));
            }
        }
        Ok(())
    }
}
