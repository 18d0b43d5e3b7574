//! Dataset manifest: one tab-separated record per line,
//! `image_path  label_path  split  volume_id  slice_index`, paths relative to
//! the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMap};

use super::pgm::{read_image, read_labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
    pub volume_id: String,
    pub slice_index: usize,
}

impl ManifestRecord {
    /// File stem of the label path, used to pair files across directories.
    pub fn slice_name(&self) -> String {
        self.labels
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_s{:02}", self.volume_id, self.slice_index))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that relative record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// One loaded slice.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub volume_id: String,
    pub slice_index: usize,
    pub image: GrayImage,
    pub labels: LabelMap,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.image.display(),
                r.labels.display(),
                r.split,
                r.volume_id,
                r.slice_index
            ));
        }
        out
    }

    /// Parses manifest text. Record order is preserved exactly as written.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0;
        for (lineno, line) in text.split('\n').enumerate() {
            let line_start = offset;
            offset += line.len() + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(line_start, format!("manifest line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let split = fields[2].parse::<Split>().map_err(bad)?;
            let slice_index = fields[4]
                .parse::<usize>()
                .map_err(|_| bad(format!("bad slice index {:?}", fields[4])))?;
            let volume_id = fields[3].to_string();
            if volume_id.is_empty() {
                return Err(bad("empty volume id".into()));
            }
            if !seen.insert((volume_id.clone(), slice_index)) {
                return Err(bad(format!("duplicate slice {volume_id}/{slice_index}")));
            }
            records.push(ManifestRecord {
                image: PathBuf::from(fields[0]),
                labels: PathBuf::from(fields[1]),
                split,
                volume_id,
                slice_index,
            });
        }
        Ok(DatasetManifest {
            root: root.into(),
            records,
        })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        for r in &manifest.records {
            for p in [&r.image, &r.labels] {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest but missing"),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn records_in(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| split.is_none_or(|s| r.split == s))
    }

    /// Volume ids in first-appearance order with their records.
    pub fn volumes(&self, split: Option<Split>) -> Vec<(String, Vec<&ManifestRecord>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in self.records_in(split) {
            if !groups.contains_key(&r.volume_id) {
                order.push(r.volume_id.clone());
            }
            groups.entry(r.volume_id.clone()).or_default().push(r);
        }
        order
            .into_iter()
            .map(|v| {
                let recs = groups.remove(&v).unwrap_or_default();
                (v, recs)
            })
            .collect()
    }

    /// Loads every record of `split` (all when `None`), checking that image
    /// and labels agree and that slices of one volume share dimensions.
    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        let mut dims: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut out = Vec::new();
        for r in self.records_in(split) {
            let image = read_image(self.resolve(&r.image))?;
            let labels = read_labels(self.resolve(&r.labels))?;
            if (image.width, image.height) != (labels.width, labels.height) {
                return Err(Error::dim(format!(
                    "{}: image {}x{} but labels {}x{}",
                    r.image.display(),
                    image.width,
                    image.height,
                    labels.width,
                    labels.height
                )));
            }
            let d = *dims.entry(&r.volume_id).or_insert((image.width, image.height));
            if d != (image.width, image.height) {
                return Err(Error::dim(format!(
                    "volume {} mixes slice sizes {}x{} and {}x{}",
                    r.volume_id, d.0, d.1, image.width, image.height
                )));
            }
            out.push(Sample {
                name: r.slice_name(),
                volume_id: r.volume_id.clone(),
                slice_index: r.slice_index,
                image,
                labels,
            });
        }
        Ok(out)
    }
}
