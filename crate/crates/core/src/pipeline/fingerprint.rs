//! Dataset statistics that drive planning and intensity normalization.

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SegmentationSample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub dims: usize,
    pub modality: String,
    pub in_channels: usize,
    pub n_classes: usize,
    pub n_train: usize,
    /// Total voxel count over all training images.
    pub total_voxels: usize,
    pub median_shape: Vec<usize>,
    pub median_spacing: Vec<f64>,
    pub min_spacing: Vec<f64>,
    pub max_spacing: Vec<f64>,
    pub percentile_00_5: f64,
    pub percentile_99_5: f64,
    /// Mean and standard deviation after clipping to the percentile range.
    pub mean: f64,
    pub std: f64,
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Percentile `q` in [0, 100] of sorted values, interpolating linearly between ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl DatasetFingerprint {
    /// Computes statistics over training cases only.
    pub fn from_samples(manifest: &DatasetManifest, train: &[SegmentationSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("fingerprint needs at least one training case".into()));
        }
        let dims = manifest.dims;
        let axis_median = |f: &dyn Fn(&SegmentationSample, usize) -> f64, a: usize| {
            let mut v: Vec<f64> = train.iter().map(|s| f(s, a)).collect();
            median(&mut v)
        };
        let median_shape = (0..dims)
            .map(|a| axis_median(&|s, a| s.spatial()[a] as f64, a).round() as usize)
            .collect();
        let median_spacing = (0..dims).map(|a| axis_median(&|s, a| s.spacing[a], a)).collect();
        let fold = |init: f64, f: fn(f64, f64) -> f64| -> Vec<f64> {
            (0..dims).map(|a| train.iter().map(|s| s.spacing[a]).fold(init, f)).collect()
        };
        let mut values: Vec<f64> = train.iter().flat_map(|s| s.image.data().iter().map(|&v| v as f64)).collect();
        values.sort_by(f64::total_cmp);
        let lo = percentile(&values, 0.5);
        let hi = percentile(&values, 99.5);
        let n = values.len() as f64;
        let mean = values.iter().map(|v| v.clamp(lo, hi)).sum::<f64>() / n;
        let var = values.iter().map(|v| (v.clamp(lo, hi) - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            dims,
            modality: manifest.modality.clone(),
            in_channels: train[0].image.shape()[0],
            n_classes: manifest.n_classes,
            n_train: train.len(),
            total_voxels: train.iter().map(|s| s.label.len()).sum(),
            median_shape,
            median_spacing,
            min_spacing: fold(f64::INFINITY, f64::min),
            max_spacing: fold(0.0, f64::max),
            percentile_00_5: lo,
            percentile_99_5: hi,
            mean,
            std: var.sqrt(),
        })
    }

    /// Loads the training split and fingerprints it.
    pub fn compute(manifest: &DatasetManifest, root: &std::path::Path) -> Result<Self> {
        let train = manifest.load_split(root, Split::Train)?;
        Self::from_samples(manifest, &train)
    }

    /// CT images use dataset-wide clipping and z-scoring; other modalities are
    /// z-scored per image. A zero standard deviation leaves plain zero-centering.
    pub fn normalize(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let z = |v: f64, mean: f64, std: f64| if std > 0.0 { (v - mean) / std } else { v - mean };
        if self.modality.eq_ignore_ascii_case("ct") {
            let (lo, hi, m, s) = (self.percentile_00_5, self.percentile_99_5, self.mean, self.std);
            image.map(|v| z((v as f64).clamp(lo, hi), m, s) as f32)
        } else {
            let n = image.len() as f64;
            let m = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let s = (image.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
            image.map(|v| z(v as f64, m, s) as f32)
        }
    }

    pub fn normalize_sample(&self, mut sample: SegmentationSample) -> SegmentationSample {
        sample.image = self.normalize(&sample.image);
        sample
    }
}
