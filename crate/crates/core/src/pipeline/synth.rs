//! Deterministic synthetic 2D segmentation tasks.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{CaseEntry, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::instance::{BOUNDARY, INTERIOR};
use crate::tensor::{io, LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    /// Bright and dark ellipses, one class each.
    Blobs,
    /// Non-overlapping disks labelled as interior plus a boundary ring.
    Cells,
    /// Bright and dark squares; a corner cue decides which kind is foreground.
    Longrange,
}

impl FromStr for SynthTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthTask::Blobs),
            "cells" => Ok(SynthTask::Cells),
            "longrange" => Ok(SynthTask::Longrange),
            other => Err(Error::Dataset(format!("unknown task {other:?}; expected blobs, cells or longrange"))),
        }
    }
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::Blobs => "blobs",
            SynthTask::Cells => "cells",
            SynthTask::Longrange => "longrange",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            SynthTask::Blobs => &["background", "bright", "dark"],
            SynthTask::Cells => &["background", "interior", "boundary"],
            SynthTask::Longrange => &["background", "target"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
}

/// One generated image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    /// `(1, size, size)`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    /// Number of rendered objects.
    pub n_objects: usize,
}

const NOISE_STD: f64 = 0.2;

struct Canvas {
    size: usize,
    intensity: Vec<f64>,
    label: Vec<u8>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            intensity: vec![0.0; size * size],
            label: vec![0; size * size],
        }
    }

    fn finish(self, rng: &mut ChaCha8Rng, n_objects: usize) -> SynthCase {
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let data = self.intensity.iter().map(|&v| (v + noise.sample(rng)) as f32).collect();
        SynthCase {
            image: Tensor::from_vec(&[1, self.size, self.size], data).expect("shape"),
            label: LabelMap::from_vec(&[self.size, self.size], self.label).expect("shape"),
            n_objects,
        }
    }
}

fn blobs(size: usize, rng: &mut ChaCha8Rng) -> SynthCase {
    let mut c = Canvas::new(size);
    let s = size as f64;
    let n = 4;
    for i in 0..n {
        let (class, value) = if i % 2 == 0 { (1u8, 1.0) } else { (2u8, -1.0) };
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let ry = rng.random_range(0.08 * s..0.22 * s);
        let rx = rng.random_range(0.08 * s..0.22 * s);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (st, ct) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                if u * u + v * v <= 1.0 {
                    c.intensity[y * size + x] = value;
                    c.label[y * size + x] = class;
                }
            }
        }
    }
    c.finish(rng, n)
}

fn cells(size: usize, rng: &mut ChaCha8Rng) -> SynthCase {
    let mut c = Canvas::new(size);
    let s = size as f64;
    let (rmin, rmax) = ((s / 16.0).max(3.0), (s / 9.0).max(4.0));
    let target = rng.random_range(3..=8usize);
    let mut disks: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..200 {
        if disks.len() == target {
            break;
        }
        let r = rng.random_range(rmin..rmax);
        let cy = rng.random_range(r + 1.0..s - r - 1.0);
        let cx = rng.random_range(r + 1.0..s - r - 1.0);
        // boundary rings may touch; interiors stay apart
        if disks.iter().all(|&(y, x, q)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() >= r + q + 1.0) {
            disks.push((cy, cx, r));
        }
    }
    for &(cy, cx, r) in &disks {
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= r {
                    let ring = d > r - 1.5;
                    c.intensity[y * size + x] = if ring { 1.5 } else { 0.7 };
                    c.label[y * size + x] = if ring { BOUNDARY } else { INTERIOR };
                }
            }
        }
    }
    c.finish(rng, disks.len())
}

/// Side of the square cue in the top-left corner.
pub fn cue_size(size: usize) -> usize {
    (size / 16).max(2)
}

/// Objects of the long-range task keep at least this Chebyshev distance from the cue corner.
pub fn longrange_min_distance(size: usize) -> usize {
    size / 2
}

/// Renders the long-range task with an explicit cue sign.
pub fn longrange_with_cue(size: usize, rng: &mut ChaCha8Rng, cue_bright: bool) -> SynthCase {
    let mut c = Canvas::new(size);
    let cue = cue_size(size);
    let cue_value = if cue_bright { 1.0 } else { -1.0 };
    for y in 0..cue {
        for x in 0..cue {
            c.intensity[y * size + x] = cue_value;
        }
    }
    let min_d = longrange_min_distance(size);
    let side_lo = (size / 10).max(3);
    let side_hi = (size / 5).max(side_lo + 1);
    let n = 6;
    let mut placed = 0;
    for i in 0..n {
        let bright = i % 2 == 0;
        let side = rng.random_range(side_lo..side_hi);
        let (y0, x0) = loop {
            let y0 = rng.random_range(0..=size - side);
            let x0 = rng.random_range(0..=size - side);
            if y0.max(x0) >= min_d {
                break (y0, x0);
            }
        };
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                c.intensity[y * size + x] = if bright { 1.0 } else { -1.0 };
                c.label[y * size + x] = (bright == cue_bright) as u8;
            }
        }
        placed += 1;
    }
    c.finish(rng, placed)
}

/// Generates case `index` of a task; each case draws from its own generator stream.
pub fn synth_case(task: SynthTask, size: usize, seed: u64, index: u64) -> SynthCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    match task {
        SynthTask::Blobs => blobs(size, &mut rng),
        SynthTask::Cells => cells(size, &mut rng),
        SynthTask::Longrange => {
            let cue_bright = rng.random_bool(0.5);
            longrange_with_cue(size, &mut rng, cue_bright)
        }
    }
}

/// Writes images, labels and `manifest.json` under `out`.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    if spec.size < 16 {
        return Err(Error::Dataset(format!("size {} is below the minimum of 16", spec.size)));
    }
    if spec.n_train == 0 {
        return Err(Error::Dataset("at least one training case is required".into()));
    }
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut cases = Vec::new();
    for i in 0..spec.n_train + spec.n_test {
        let split = if i < spec.n_train { Split::Train } else { Split::Test };
        let id = format!("{}_{i:04}", spec.task.name());
        let case = synth_case(spec.task, spec.size, spec.seed, i as u64);
        let image = format!("images/{id}.umtn");
        let label = format!("labels/{id}.umtn");
        io::write(out.join(&image), &case.image)?;
        io::write(out.join(&label), &case.label)?;
        cases.push(CaseEntry {
            id,
            image,
            label,
            spacing: vec![1.0, 1.0],
            split,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synth-{}", spec.task.name()),
        dims: 2,
        modality: "synthetic".into(),
        n_classes: spec.task.class_names().len(),
        class_names: spec.task.class_names(),
        cases,
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
