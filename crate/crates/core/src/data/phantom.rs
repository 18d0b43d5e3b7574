//! Seeded synthetic chest-slice phantoms with exact labels.
//!
//! Each slice has a bright body ellipse on a dark background, two dark lung
//! ellipses inside it, and up to a few elliptical GGO (moderate intensity) and
//! CON (bright) blobs inside the lungs. CON overrides GGO where they overlap.
//! Blob edges are intensity-smoothed over about one pixel, and additive
//! Gaussian noise is applied everywhere, so the task is not a pure threshold.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{is_lung, is_pathology, GrayImage, LabelMap, CON, GGO, HEALTHY, NON_LUNG};

use super::manifest::{DatasetManifest, ManifestRecord, Split};
use super::pgm::{quantize, write_image, write_labels};

pub type Range = (f32, f32);

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub n_volumes: usize,
    /// The last `n_test_volumes` volumes form the test split.
    pub n_test_volumes: usize,
    pub slices_per_volume: usize,
    pub image_size: usize,
    pub seed: u64,
    pub healthy_intensity: Range,
    pub ggo_intensity: Range,
    pub con_intensity: Range,
    pub body_intensity: Range,
    pub noise_sigma: f32,
    /// Lung half-axes as fractions of the image size.
    pub lung_half_width: Range,
    pub lung_half_height: Range,
    pub max_ggo_blobs: usize,
    pub max_con_blobs: usize,
    /// Blob half-axes as fractions of the image size.
    pub blob_radius: Range,
    /// Probability that a pixel on a pathology boundary takes a neighbour's
    /// label in the simulated second annotation.
    pub rater2_flip_prob: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_volumes: 12,
            n_test_volumes: 4,
            slices_per_volume: 8,
            image_size: 64,
            seed: 0,
            healthy_intensity: (0.05, 0.20),
            ggo_intensity: (0.35, 0.55),
            con_intensity: (0.65, 0.85),
            body_intensity: (0.90, 1.0),
            noise_sigma: 0.05,
            lung_half_width: (0.15, 0.18),
            lung_half_height: (0.26, 0.30),
            max_ggo_blobs: 3,
            max_con_blobs: 2,
            blob_radius: (0.06, 0.12),
            rater2_flip_prob: 0.5,
        }
    }
}

fn check_range(name: &str, r: Range) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1) {
        return Err(Error::config(format!("{name} range {r:?} is not an ordered interval")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("healthy_intensity", self.healthy_intensity),
            ("ggo_intensity", self.ggo_intensity),
            ("con_intensity", self.con_intensity),
            ("body_intensity", self.body_intensity),
            ("lung_half_width", self.lung_half_width),
            ("lung_half_height", self.lung_half_height),
            ("blob_radius", self.blob_radius),
        ] {
            check_range(name, r)?;
        }
        for (name, r) in [
            ("healthy_intensity", self.healthy_intensity),
            ("ggo_intensity", self.ggo_intensity),
            ("con_intensity", self.con_intensity),
            ("body_intensity", self.body_intensity),
        ] {
            if r.0 < 0.0 || r.1 > 1.0 {
                return Err(Error::config(format!("{name} {r:?} must lie in [0,1]")));
            }
        }
        if !(self.con_intensity.0 > self.ggo_intensity.1 && self.ggo_intensity.0 > self.healthy_intensity.1) {
            return Err(Error::config(
                "intensity ranges must be ordered healthy < GGO < CON without overlap",
            ));
        }
        if self.n_volumes == 0 || self.slices_per_volume == 0 {
            return Err(Error::config("need at least one volume and one slice per volume"));
        }
        if self.n_test_volumes > self.n_volumes {
            return Err(Error::config(format!(
                "{} test volumes requested out of {}",
                self.n_test_volumes, self.n_volumes
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.rater2_flip_prob) {
            return Err(Error::config("rater2_flip_prob must lie in [0,1]"));
        }
        let size = self.image_size as f32;
        if self.image_size < 16 || size * self.blob_radius.0 < 1.0 {
            return Err(Error::config(format!(
                "image size {} is too small for the configured geometry",
                self.image_size
            )));
        }
        // Two lungs side by side must fit inside the body ellipse.
        if self.lung_half_width.1 > 0.2 || self.lung_half_height.1 > 0.36 || self.lung_half_width.0 <= 0.0 {
            return Err(Error::config("lung half-axes do not fit inside the body"));
        }
        Ok(())
    }

    pub fn total_slices(&self) -> usize {
        self.n_volumes * self.slices_per_volume
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    angle: f32,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    fn radius(&self, x: f32, y: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Approximate signed distance in pixels, positive inside.
    fn depth(&self, x: f32, y: f32) -> f32 {
        (1.0 - self.radius(x, y)) * self.rx.min(self.ry)
    }
}

/// Intensity membership over a ~1.5 px band straddling the boundary.
fn membership(depth: f32) -> f32 {
    ((depth + 0.75) / 1.5).clamp(0.0, 1.0)
}

struct Blob {
    shape: Ellipse,
    intensity: f32,
    label: u8,
}

/// One generated slice with both annotations.
#[derive(Clone, Debug)]
pub struct PhantomSlice {
    pub volume_id: String,
    pub slice_index: usize,
    pub split: Split,
    pub image: GrayImage,
    pub labels: LabelMap,
    /// Boundary-perturbed copy of `labels`, standing in for a second rater.
    pub rater2: LabelMap,
    /// Union of the two lung ellipses, before any labelling.
    pub lung_mask: Vec<bool>,
}

impl PhantomSlice {
    pub fn name(&self) -> String {
        format!("{}_s{:02}", self.volume_id, self.slice_index)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f32 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

fn point_in(rng: &mut ChaCha8Rng, e: &Ellipse, max_radius: f32) -> (f32, f32) {
    loop {
        let u: f32 = rng.random_range(-1.0..=1.0);
        let v: f32 = rng.random_range(-1.0..=1.0);
        if u * u + v * v <= 1.0 {
            let (s, c) = e.angle.sin_cos();
            let (a, b) = (u * e.rx * max_radius, v * e.ry * max_radius);
            return (e.cx + c * a - s * b, e.cy + s * a + c * b);
        }
    }
}

struct VolumeGeometry {
    body: Ellipse,
    lungs: [Ellipse; 2],
}

fn volume_geometry(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> VolumeGeometry {
    let size = cfg.image_size as f32;
    let mid = size / 2.0;
    let body = Ellipse {
        cx: mid + rng.random_range(-0.01..=0.01) * size,
        cy: mid + rng.random_range(-0.01..=0.01) * size,
        rx: rng.random_range(0.44..=0.47) * size,
        ry: rng.random_range(0.39..=0.42) * size,
        angle: 0.0,
    };
    let lung = |rng: &mut ChaCha8Rng, side: f32| Ellipse {
        cx: body.cx + side * rng.random_range(0.20..=0.22) * size,
        cy: body.cy + rng.random_range(-0.02..=0.02) * size,
        rx: uniform(rng, cfg.lung_half_width) * size,
        ry: uniform(rng, cfg.lung_half_height) * size,
        angle: side * rng.random_range(0.0..=0.12),
    };
    let left = lung(rng, -1.0);
    let right = lung(rng, 1.0);
    VolumeGeometry {
        body,
        lungs: [left, right],
    }
}

fn render_slice(
    cfg: &PhantomConfig,
    geom: &VolumeGeometry,
    slice: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f32>,
) -> (GrayImage, LabelMap, Vec<bool>) {
    let size = cfg.image_size;
    // Lungs are largest mid-volume and taper towards the ends.
    let phase = PI * (slice as f32 + 0.5) / cfg.slices_per_volume as f32;
    let scale = 0.8 + 0.2 * phase.sin();
    let lungs = geom.lungs.map(|l| Ellipse {
        rx: l.rx * scale,
        ry: l.ry * scale,
        ..l
    });

    let body_value = uniform(rng, cfg.body_intensity);
    let lung_value = uniform(rng, cfg.healthy_intensity);

    let mut blobs = Vec::new();
    let n_ggo = rng.random_range(0..=cfg.max_ggo_blobs);
    let n_con = rng.random_range(0..=cfg.max_con_blobs);
    for (count, label, range) in [(n_ggo, GGO, cfg.ggo_intensity), (n_con, CON, cfg.con_intensity)] {
        for _ in 0..count {
            let host = &lungs[rng.random_range(0..2)];
            let (cx, cy) = point_in(rng, host, 0.75);
            let radius = |rng: &mut ChaCha8Rng| uniform(rng, cfg.blob_radius) * size as f32;
            let shape = Ellipse {
                cx,
                cy,
                rx: radius(rng),
                ry: radius(rng),
                angle: rng.random_range(0.0..PI),
            };
            blobs.push(Blob {
                shape,
                intensity: uniform(rng, range),
                label,
            });
        }
    }

    let mut pixels = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    let mut lung_mask = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
            let mut value = if geom.body.radius(x, y) < 1.0 { body_value } else { 0.0 };
            let mut label = NON_LUNG;
            let in_lung = lungs.iter().any(|l| l.radius(x, y) < 1.0);
            lung_mask.push(in_lung);
            if in_lung {
                label = HEALTHY;
                value = lung_value;
                // GGO blobs first so CON paints over them.
                for blob in blobs.iter() {
                    let m = membership(blob.shape.depth(x, y));
                    if m > 0.0 {
                        value = value * (1.0 - m) + blob.intensity * m;
                    }
                    if blob.shape.radius(x, y) < 1.0 {
                        label = blob.label;
                    }
                }
            }
            let noisy = (value + noise.sample(rng)).clamp(0.0, 1.0);
            pixels.push(quantize(noisy) as f32 / 255.0);
            labels.push(label);
        }
    }
    (
        GrayImage {
            width: size,
            height: size,
            pixels,
        },
        LabelMap {
            width: size,
            height: size,
            labels,
        },
        lung_mask,
    )
}

/// Moves pathology boundaries by up to one pixel: each lung pixel bordering a
/// differently-labelled lung pixel (with pathology on at least one side)
/// takes a random such neighbour's label with probability `prob`.
pub fn perturb_boundaries<R: Rng>(labels: &LabelMap, prob: f64, rng: &mut R) -> LabelMap {
    let (w, h) = (labels.width, labels.height);
    let mut out = labels.clone();
    let mut candidates = Vec::with_capacity(8);
    for row in 0..h {
        for col in 0..w {
            let own = labels.get(row, col);
            if !is_lung(own) {
                continue;
            }
            candidates.clear();
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if (dr, dc) == (0, 0) || r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let other = labels.get(r as usize, c as usize);
                    if is_lung(other) && other != own && (is_pathology(own) || is_pathology(other)) {
                        candidates.push(other);
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let roll: f64 = rng.random();
            let pick = rng.random_range(0..candidates.len());
            if roll < prob {
                out.labels[row * w + col] = candidates[pick];
            }
        }
    }
    out
}

/// Generates every slice in memory, in volume-major order.
pub fn generate_slices(cfg: &PhantomConfig) -> Result<Vec<PhantomSlice>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rater_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rater_rng.set_stream(1);
    let noise = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let first_test = cfg.n_volumes - cfg.n_test_volumes;
    let mut out = Vec::with_capacity(cfg.total_slices());
    for v in 0..cfg.n_volumes {
        let geom = volume_geometry(cfg, &mut rng);
        let split = if v >= first_test { Split::Test } else { Split::Train };
        for s in 0..cfg.slices_per_volume {
            let (image, labels, lung_mask) = render_slice(cfg, &geom, s, &mut rng, &noise);
            let rater2 = perturb_boundaries(&labels, cfg.rater2_flip_prob, &mut rater_rng);
            out.push(PhantomSlice {
                volume_id: format!("v{v:03}"),
                slice_index: s,
                split,
                image,
                labels,
                rater2,
                lung_mask,
            });
        }
    }
    Ok(out)
}

/// Directory layout written by [`generate_phantom_dataset`].
pub const IMAGE_DIR: &str = "images";
pub const LABEL_DIR: &str = "labels";
pub const RATER2_DIR: &str = "rater2";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes images, labels, second-rater labels and `manifest.tsv` under
/// `out_dir`.
pub fn generate_phantom_dataset(cfg: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let slices = generate_slices(cfg)?;
    for sub in [IMAGE_DIR, LABEL_DIR, RATER2_DIR] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(slices.len());
    for s in &slices {
        let file = format!("{}.pgm", s.name());
        let image = Path::new(IMAGE_DIR).join(&file);
        let labels = Path::new(LABEL_DIR).join(&file);
        write_image(out_dir.join(&image), &s.image)?;
        write_labels(out_dir.join(&labels), &s.labels)?;
        write_labels(out_dir.join(RATER2_DIR).join(&file), &s.rater2)?;
        records.push(ManifestRecord {
            image,
            labels,
            split: s.split,
            volume_id: s.volume_id.clone(),
            slice_index: s.slice_index,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
