//! Dataset manifest: case list with file locations, spacing and split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    /// Relative to the manifest's directory. Holds `(C, spatial...)` f32 values.
    pub image: String,
    /// Relative to the manifest's directory. Holds `(spatial...)` u8 labels.
    pub label: String,
    pub spacing: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dims: usize,
    pub modality: String,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

/// One loaded case.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub spacing: Vec<f64>,
}

impl SegmentationSample {
    pub fn spatial(&self) -> &[usize] {
        self.label.shape()
    }
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Reads a manifest and returns it with the directory its paths are relative to.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_json(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, root))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    fn check_header(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims) {
            return Err(Error::Dataset(format!("dims {} not in 1..=3", self.dims)));
        }
        if self.n_classes < 2 || self.n_classes > 255 || self.class_names.len() != self.n_classes {
            return Err(Error::Dataset(format!(
                "n_classes {} must be in 2..=255 and match {} class names",
                self.n_classes,
                self.class_names.len()
            )));
        }
        Ok(())
    }

    /// Loads and validates one case.
    pub fn load_case(&self, root: &Path, entry: &CaseEntry) -> Result<SegmentationSample> {
        let id = &entry.id;
        let fail = |m: String| Error::Dataset(format!("case {id}: {m}"));
        if entry.spacing.len() != self.dims || entry.spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(fail(format!("spacing {:?} must have {} positive entries", entry.spacing, self.dims)));
        }
        let image: Tensor<f32> = io::read(root.join(&entry.image)).map_err(|e| fail(e.to_string()))?;
        let label: LabelMap = io::read(root.join(&entry.label)).map_err(|e| fail(e.to_string()))?;
        if image.rank() != self.dims + 1 || image.shape()[1..] != *label.shape() {
            return Err(fail(format!(
                "image {:?} must be (C, {:?})",
                image.shape(),
                label.shape()
            )));
        }
        if let Some(&bad) = label.data().iter().find(|&&v| v as usize >= self.n_classes) {
            return Err(fail(format!("label value {bad} >= n_classes {}", self.n_classes)));
        }
        if !image.all_finite() {
            return Err(fail("image contains non-finite values".into()));
        }
        Ok(SegmentationSample {
            id: id.clone(),
            image,
            label,
            spacing: entry.spacing.clone(),
        })
    }

    /// Loads every case of a split, validating as it goes.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<SegmentationSample>> {
        self.check_header()?;
        self.split(split).map(|c| self.load_case(root, c)).collect()
    }

    /// Checks every referenced file and value.
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.check_header()?;
        let mut ids: Vec<&str> = self.cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Dataset(format!("duplicate case id {}", w[0])));
        }
        let mut channels = None;
        for c in &self.cases {
            let s = self.load_case(root, c)?;
            let ch = s.image.shape()[0];
            if *channels.get_or_insert(ch) != ch {
                return Err(Error::Dataset(format!("case {}: {ch} channels, others have {}", c.id, channels.unwrap())));
            }
        }
        Ok(())
    }
}
