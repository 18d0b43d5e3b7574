//! Overlap, surface distance and correlation measures.

use std::fmt::Write as _;
use std::path::Path;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::image::{is_pathology, LabelMap, CON, GGO};

/// Region sizes for one binary region pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl Overlap {
    pub fn of(pred: &LabelMap, gt: &LabelMap, member: impl Fn(u8) -> bool) -> Result<Self> {
        pred.same_shape(gt)?;
        let mut o = Overlap::default();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (member(p), member(g));
            o.pred += p as u64;
            o.gt += g as u64;
            o.intersection += (p && g) as u64;
        }
        Ok(o)
    }

    /// `2|P∩G| / (|P|+|G|)`, with 1 for two empty regions.
    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
        }
    }
}

impl std::ops::AddAssign for Overlap {
    fn add_assign(&mut self, o: Overlap) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.gt += o.gt;
    }
}

pub fn dice_score(pred: &LabelMap, gt: &LabelMap, label: u8) -> Result<f64> {
    Ok(Overlap::of(pred, gt, |l| l == label)?.dice())
}

/// Dice of GGO ∪ CON against everything else.
pub fn binary_pathology_dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(Overlap::of(pred, gt, is_pathology)?.dice())
}

/// Pixel confusion counts over the pathology classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Micro-averaged over GGO and CON.
    pub fn pathology(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        pred.same_shape(gt)?;
        let mut c = Confusion::default();
        for class in [GGO, CON] {
            for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
                match (p == class, g == class) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, 1 when there is nothing to find.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn pixel_f1(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(Confusion::pathology(pred, gt)?.f1())
}

/// A pixel position `(row, col)`.
pub type Point = (i64, i64);

/// Region pixels with at least one of their 8 neighbours outside the region
/// (positions beyond the image count as outside), in row-major order.
pub fn boundary_points(labels: &LabelMap, member: impl Fn(u8) -> bool) -> Vec<Point> {
    let (w, h) = (labels.width as i64, labels.height as i64);
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && member(labels.labels[(r * w + c) as usize]);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !inside(r, c) {
                continue;
            }
            let edge = (-1..=1).any(|dr| (-1..=1).any(|dc| (dr, dc) != (0, 0) && !inside(r + dr, c + dc)));
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Points grouped by row for nearest-neighbour queries.
struct RowIndex {
    rows: Vec<(i64, Vec<i64>)>,
}

impl RowIndex {
    fn new(points: &[Point]) -> Self {
        let mut sorted = points.to_vec();
        sorted.sort_unstable();
        let mut rows: Vec<(i64, Vec<i64>)> = Vec::new();
        for (r, c) in sorted {
            match rows.last_mut() {
                Some((row, cols)) if *row == r => cols.push(c),
                _ => rows.push((r, vec![c])),
            }
        }
        RowIndex { rows }
    }

    fn nearest_in_row(cols: &[i64], c: i64) -> i64 {
        let i = cols.partition_point(|&x| x < c);
        let mut best = i64::MAX;
        if i < cols.len() {
            best = cols[i] - c;
        }
        if i > 0 {
            best = best.min(c - cols[i - 1]);
        }
        best
    }

    /// Smallest squared distance from `p` to any indexed point.
    fn min_sq_dist(&self, (r, c): Point) -> i64 {
        let start = self.rows.partition_point(|(row, _)| *row < r);
        let mut best = i64::MAX;
        let visit = |i: usize, best: &mut i64| -> bool {
            let (row, cols) = &self.rows[i];
            let dr = (row - r) * (row - r);
            if dr >= *best {
                return false;
            }
            let dc = Self::nearest_in_row(cols, c);
            *best = (*best).min(dr + dc * dc);
            true
        };
        for i in start..self.rows.len() {
            if !visit(i, &mut best) {
                break;
            }
        }
        for i in (0..start).rev() {
            if !visit(i, &mut best) {
                break;
            }
        }
        best
    }
}

fn directed(a: &[Point], b: &RowIndex) -> f64 {
    let total: f64 = a.iter().map(|&p| (b.min_sq_dist(p) as f64).sqrt()).sum();
    total / a.len() as f64
}

/// Modified Hausdorff distance `max(d(A,B), d(B,A))` with
/// `d(A,B) = mean over a of min over b of ‖a−b‖`. `None` if either set is empty.
pub fn mhd(a: &[Point], b: &[Point]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (ia, ib) = (RowIndex::new(a), RowIndex::new(b));
    Some(directed(a, &ib).max(directed(b, &ia)))
}

/// MHD between the boundaries of the regions selected by `member`.
pub fn region_mhd(pred: &LabelMap, gt: &LabelMap, member: impl Fn(u8) -> bool + Copy) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    Ok(mhd(&boundary_points(pred, member), &boundary_points(gt, member)))
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("pearson on {} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 || !(sxx * syy).is_finite() {
        return Err(Error::UndefinedCorrelation("a series has zero or non-finite variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    let p = if one_minus <= 0.0 {
        0.0
    } else {
        let t2 = r * r * df / one_minus;
        beta_reg(df / 2.0, 0.5, df / (df + t2))
    };
    Ok((r, p))
}

/// All measures for one slice; undefined distances are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub slice_id: String,
    pub ggo: Overlap,
    pub con: Overlap,
    pub binary: Overlap,
    pub confusion: Confusion,
    pub mhd_ggo: Option<f64>,
    pub mhd_con: Option<f64>,
    pub mhd_binary: Option<f64>,
}

impl SliceMetrics {
    pub fn compute(slice_id: impl Into<String>, pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        Ok(SliceMetrics {
            slice_id: slice_id.into(),
            ggo: Overlap::of(pred, gt, |l| l == GGO)?,
            con: Overlap::of(pred, gt, |l| l == CON)?,
            binary: Overlap::of(pred, gt, is_pathology)?,
            confusion: Confusion::pathology(pred, gt)?,
            mhd_ggo: region_mhd(pred, gt, |l| l == GGO)?,
            mhd_con: region_mhd(pred, gt, |l| l == CON)?,
            mhd_binary: region_mhd(pred, gt, is_pathology)?,
        })
    }
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub excluded: usize,
}

impl DistanceSummary {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return DistanceSummary {
                mean: None,
                std: None,
                excluded,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        DistanceSummary {
            mean: Some(mean),
            std: Some(var.sqrt()),
            excluded,
        }
    }
}

/// Per-slice rows plus pooled overlap and averaged distances.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub slices: Vec<SliceMetrics>,
    pub ggo: Overlap,
    pub con: Overlap,
    pub binary: Overlap,
    pub confusion: Confusion,
    pub mhd_ggo: DistanceSummary,
    pub mhd_con: DistanceSummary,
    pub mhd_binary: DistanceSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn new(slices: Vec<SliceMetrics>) -> Self {
        let (mut ggo, mut con, mut binary, mut confusion) =
            (Overlap::default(), Overlap::default(), Overlap::default(), Confusion::default());
        for s in &slices {
            ggo += s.ggo;
            con += s.con;
            binary += s.binary;
            confusion += s.confusion;
        }
        MetricReport {
            ggo,
            con,
            binary,
            confusion,
            mhd_ggo: DistanceSummary::of(slices.iter().map(|s| s.mhd_ggo)),
            mhd_con: DistanceSummary::of(slices.iter().map(|s| s.mhd_con)),
            mhd_binary: DistanceSummary::of(slices.iter().map(|s| s.mhd_binary)),
            slices,
        }
    }

    pub const CSV_HEADER: &'static str = "slice_id,dice_ggo,dice_con,dice_binary,mhd_ggo,mhd_con,mhd_binary,pixel_f1";

    /// The aggregate row as it appears in the CSV.
    pub fn aggregate_row(&self) -> String {
        format!(
            "aggregate,{:.6},{:.6},{:.6},{},{},{},{:.6}",
            self.ggo.dice(),
            self.con.dice(),
            self.binary.dice(),
            fmt_opt(self.mhd_ggo.mean),
            fmt_opt(self.mhd_con.mean),
            fmt_opt(self.mhd_binary.mean),
            self.confusion.f1()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.slices {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{},{},{:.6}",
                s.slice_id,
                s.ggo.dice(),
                s.con.dice(),
                s.binary.dice(),
                fmt_opt(s.mhd_ggo),
                fmt_opt(s.mhd_con),
                fmt_opt(s.mhd_binary),
                s.confusion.f1()
            );
        }
        out.push_str(&self.aggregate_row());
        out.push('\n');
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Human-readable summary with MHD spread and exclusion counts.
    pub fn summary(&self) -> String {
        let dist = |name: &str, d: &DistanceSummary| {
            format!(
                "mhd_{name} {} ± {} (excluded {})",
                fmt_opt(d.mean),
                fmt_opt(d.std),
                d.excluded
            )
        };
        format!(
            "{}\n{}\n{}\n{}",
            self.aggregate_row(),
            dist("ggo", &self.mhd_ggo),
            dist("con", &self.mhd_con),
            dist("binary", &self.mhd_binary)
        )
    }
}
