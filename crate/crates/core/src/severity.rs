//! Infection extent and gravity ratios per volume.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{LabelMap, NUM_LABELS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub non_lung: u64,
    pub healthy: u64,
    pub ggo: u64,
    pub con: u64,
}

impl ClassCounts {
    /// Lung cavity: healthy + GGO + CON.
    pub fn lung(&self) -> u64 {
        self.healthy + self.ggo + self.con
    }

    pub fn infection(&self) -> u64 {
        self.ggo + self.con
    }

    pub fn total(&self) -> u64 {
        self.non_lung + self.lung()
    }
}

/// Per-class voxel counts over every slice of a volume.
pub fn class_counts(stack: &[LabelMap]) -> Result<ClassCounts> {
    if stack.is_empty() {
        return Err(Error::Usage("class counts of an empty volume".into()));
    }
    let mut c = [0u64; NUM_LABELS];
    for map in stack {
        for &l in &map.labels {
            c[l as usize] += 1;
        }
    }
    Ok(ClassCounts {
        non_lung: c[0],
        healthy: c[1],
        ggo: c[2],
        con: c[3],
    })
}

/// `(GGO + CON) / (healthy + GGO + CON)`.
pub fn extent_ratio(counts: &ClassCounts) -> Result<f64> {
    if counts.lung() == 0 {
        return Err(Error::UndefinedRatio("extent with an empty lung cavity".into()));
    }
    Ok(counts.infection() as f64 / counts.lung() as f64)
}

/// `CON / (GGO + CON)`.
pub fn gravity_ratio(counts: &ClassCounts) -> Result<f64> {
    if counts.infection() == 0 {
        return Err(Error::UndefinedRatio("gravity without infection".into()));
    }
    Ok(counts.con as f64 / counts.infection() as f64)
}

/// Mean and population standard deviation of a ratio across members.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioStats {
    pub mean: f64,
    pub std: f64,
    /// Members whose ratio was undefined.
    pub excluded: usize,
}

/// Applies `ratio` to each member's volume; undefined members are skipped
/// and counted.
pub fn ensemble_ratio_stats(
    members: &[Vec<LabelMap>],
    ratio: impl Fn(&ClassCounts) -> Result<f64>,
) -> Result<RatioStats> {
    if members.is_empty() {
        return Err(Error::Usage("ratio statistics need at least one member".into()));
    }
    let mut values = Vec::with_capacity(members.len());
    let mut excluded = 0;
    for stack in members {
        match ratio(&class_counts(stack)?) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedRatio(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedRatio(format!("undefined for all {} members", members.len())));
    }
    let n = values.len() as f64;
    let origin = values[0];
    let shift = values.iter().map(|v| v - origin).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - origin - shift).powi(2)).sum::<f64>() / n;
    Ok(RatioStats {
        mean: origin + shift,
        std: var.sqrt(),
        excluded,
    })
}

/// One CSV row. Ratios come from the consensus labels, spreads from the
/// individual members.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSeverity {
    pub volume_id: String,
    pub counts: ClassCounts,
    pub extent: Option<f64>,
    pub gravity: Option<f64>,
    pub extent_std: Option<f64>,
    pub gravity_std: Option<f64>,
    pub excluded_members: usize,
}

impl VolumeSeverity {
    /// `consensus` is the volume's label stack; `members` holds one stack per
    /// ensemble member (may be empty, e.g. for ground truth).
    pub fn compute(volume_id: impl Into<String>, consensus: &[LabelMap], members: &[Vec<LabelMap>]) -> Result<Self> {
        let counts = class_counts(consensus)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedRatio(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let (extent_std, gravity_std, excluded_members) = if members.is_empty() {
            (None, None, 0)
        } else {
            let extent_std = defined(ensemble_ratio_stats(members, extent_ratio).map(|s| s.std))?;
            let gravity_std = defined(ensemble_ratio_stats(members, gravity_ratio).map(|s| s.std))?;
            let mut excluded = 0;
            for stack in members {
                let c = class_counts(stack)?;
                if c.lung() == 0 || c.infection() == 0 {
                    excluded += 1;
                }
            }
            (extent_std, gravity_std, excluded)
        };
        Ok(VolumeSeverity {
            volume_id: volume_id.into(),
            extent: defined(extent_ratio(&counts))?,
            gravity: defined(gravity_ratio(&counts))?,
            counts,
            extent_std,
            gravity_std,
            excluded_members,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeverityReport {
    pub volumes: Vec<VolumeSeverity>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl SeverityReport {
    pub const CSV_HEADER: &'static str =
        "volume_id,n_lung,n_ggo,n_con,extent,gravity,extent_std,gravity_std,excluded_members";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for v in &self.volumes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                v.volume_id,
                v.counts.lung(),
                v.counts.ggo,
                v.counts.con,
                fmt_opt(v.extent),
                fmt_opt(v.gravity),
                fmt_opt(v.extent_std),
                fmt_opt(v.gravity_std),
                v.excluded_members
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
