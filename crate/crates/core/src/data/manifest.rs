//! Dataset manifests: a CSV of `path,label,split` rows with paths relative to
//! the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

impl ManifestEntry {
    /// Identifier used in diagnostic CSVs: the file stem.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    classes: Vec<String>,
    entries: Vec<ManifestEntry>,
}

#[derive(Deserialize, Serialize)]
struct Row {
    path: String,
    label: String,
    split: Split,
}

impl Manifest {
    pub fn new(root: PathBuf, classes: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("no samples".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.label >= classes.len()) {
            return Err(Error::Data(format!(
                "{}: label index {} outside {} classes",
                e.path.display(),
                e.label,
                classes.len()
            )));
        }
        Ok(Manifest { root, classes, entries })
    }

    /// Loads a manifest, taking the class set from the order in which labels
    /// first appear.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_inner(path, None)
    }

    /// Loads a manifest whose labels must come from `classes`.
    pub fn load_with_classes(path: &Path, classes: &[String]) -> Result<Self> {
        Self::load_inner(path, Some(classes))
    }

    fn load_inner(path: &Path, declared: Option<&[String]>) -> Result<Self> {
        let parse = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_slice());
        let headers = reader.headers().map_err(|e| parse(1, e.to_string()))?;
        if headers != vec!["path", "label", "split"] {
            return Err(parse(1, "header must be `path,label,split`".into()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut classes: Vec<String> = declared.map(<[String]>::to_vec).unwrap_or_default();
        let mut entries = Vec::new();
        for record in reader.deserialize::<Row>() {
            let row = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse(line, e.to_string())
            })?;
            let line = entries.len() as u64 + 2;
            let label = match classes.iter().position(|c| *c == row.label) {
                Some(k) => k,
                None if declared.is_none() => {
                    classes.push(row.label);
                    classes.len() - 1
                }
                None => return Err(parse(line, format!("unknown label `{}`", row.label))),
            };
            let rel = PathBuf::from(&row.path);
            if !root.join(&rel).is_file() {
                return Err(parse(line, format!("missing image {}", row.path)));
            }
            entries.push(ManifestEntry { path: rel, label, split: row.split });
        }
        Manifest::new(root, classes, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for e in &self.entries {
            w.serialize(Row {
                path: e.path.to_string_lossy().replace('\\', "/"),
                label: self.classes[e.label].clone(),
                split: e.split,
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Per-class sample counts within a split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.split(split) {
            counts[e.label] += 1;
        }
        counts
    }

    /// Reads one chip as `[1, h, w]` intensities in `[0, 1]`.
    pub fn load_image<T: Real>(&self, entry: &ManifestEntry) -> Result<Tensor<T>> {
        let (pixels, w, h) = pgm::read(&self.root.join(&entry.path))?;
        let scale = T::from_f64(1.0 / 255.0);
        Tensor::new(vec![1, h, w], pixels.into_iter().map(|p| T::from_f64(p as f64) * scale).collect())
    }

    /// Loads every image of a split into memory.
    pub fn load_split<T: Real>(&self, split: Split) -> Result<Images<T>> {
        let entries = self.split(split);
        let mut images = Vec::with_capacity(entries.len());
        for e in &entries {
            let img = self.load_image::<T>(e)?;
            if let Some(first) = images.first().map(|t: &Tensor<T>| t.shape().to_vec()) {
                if img.shape() != first.as_slice() {
                    return Err(Error::Data(format!(
                        "{}: shape {:?} differs from {:?}",
                        e.path.display(),
                        img.shape(),
                        first
                    )));
                }
            }
            images.push(img);
        }
        Ok(Images {
            labels: entries.iter().map(|e| e.label).collect(),
            ids: entries.iter().map(|e| e.id()).collect(),
            images,
        })
    }
}

/// Decoded chips of one split.
#[derive(Clone, Debug)]
pub struct Images<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Real> Images<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the chosen images into an `[n, 1, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let Some(&first) = indices.first() else {
            return Err(Error::dim("empty batch"));
        };
        let item = self.images[first].shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.images[first].numel());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        let mut shape = vec![indices.len()];
        shape.extend(item);
        Tensor::new(shape, data)
    }

    pub fn all(&self) -> Result<Tensor<T>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

impl Images<f64> {
    pub fn cast_f32(&self) -> Images<f32> {
        Images {
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }
}
