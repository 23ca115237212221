//! Dataset handling, fingerprinting, automatic configuration and synthetic data.

pub mod fingerprint;
pub mod manifest;
pub mod planner;
pub mod synth;

pub use fingerprint::DatasetFingerprint;
pub use manifest::{CaseEntry, DatasetManifest, SegmentationSample, Split};
pub use planner::{plan_configuration, PlanOutcome, PlannerCfg};
pub use synth::{synth_generate, SynthSpec, SynthTask};
