//! Derives patch size, pooling, stage count and batch size from a fingerprint.

use serde::{Deserialize, Serialize};

use super::fingerprint::DatasetFingerprint;
use crate::error::{Error, Result};
use crate::network::{NetworkPlan, Variant};

pub const MAX_POOLING: usize = 7;
/// Smallest extent an axis may be halved down to.
pub const MIN_FEATURE_EXTENT: usize = 4;
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;
/// A batch never covers more than this fraction of all training voxels.
pub const MAX_BATCH_DATASET_FRACTION: f64 = 0.05;

/// Stored activations per channel-voxel for an encoder+decoder stage pair,
/// doubled for gradient buffers.
const CONV_STAGE_FACTOR: u64 = 2 * 32;
/// Additional activations of a Mamba stage per channel-voxel.
const MAMBA_STAGE_FACTOR: u64 = 2 * 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerCfg {
    /// Bytes available for activations of one training step.
    pub memory_budget: u64,
    pub base_channels: usize,
    pub variant: Variant,
}

impl Default for PlannerCfg {
    fn default() -> Self {
        Self {
            memory_budget: DEFAULT_MEMORY_BUDGET,
            base_channels: 32,
            variant: Variant::Enc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutcome {
    pub plan: NetworkPlan,
    pub warnings: Vec<String>,
}

fn halvings(extent: usize) -> usize {
    let mut k = 0;
    while k < MAX_POOLING && extent >= MIN_FEATURE_EXTENT << (k + 1) {
        k += 1;
    }
    k
}

/// Per-axis pooling counts for a patch. 2D plans cap every axis at the
/// smallest axis's count; 3D axes are independent.
pub fn pooling_for(patch: &[usize]) -> Vec<usize> {
    let mut pool: Vec<usize> = patch.iter().map(|&e| halvings(e)).collect();
    if patch.len() == 2 {
        let cap = *pool.iter().min().expect("two axes");
        pool.iter_mut().for_each(|p| *p = (*p).min(cap));
    }
    pool
}

/// Rough activation footprint of one training step in bytes (f32).
pub fn estimate_activation_bytes(plan: &NetworkPlan) -> u64 {
    plan.stage_shapes()
        .iter()
        .enumerate()
        .map(|(s, shape)| {
            let vox: u64 = shape.iter().map(|&e| e as u64).product();
            let mut factor = CONV_STAGE_FACTOR;
            if plan.variant.has_mamba_at(s, plan.n_stages) {
                factor += MAMBA_STAGE_FACTOR;
            }
            vox * plan.channels(s) as u64 * factor
        })
        .sum::<u64>()
        * 4
        * plan.batch as u64
}

fn plan_for_patch(fp: &DatasetFingerprint, cfg: &PlannerCfg, patch: Vec<usize>) -> NetworkPlan {
    let pooling = pooling_for(&patch);
    let patch = patch
        .iter()
        .zip(&pooling)
        .map(|(&e, &k)| (e >> k << k).max(1 << k))
        .collect();
    let mut plan = NetworkPlan::new(patch, pooling, fp.n_classes, cfg.variant);
    plan.base_channels = cfg.base_channels;
    plan.in_channels = fp.in_channels;
    plan
}

/// Pure function of the fingerprint and the planner settings.
pub fn plan_configuration(fp: &DatasetFingerprint, cfg: &PlannerCfg) -> Result<PlanOutcome> {
    let mut warnings = Vec::new();
    if fp.median_shape.len() != fp.dims || fp.median_shape.iter().any(|&e| e == 0) {
        return Err(Error::Plan(format!("fingerprint shape {:?} is invalid", fp.median_shape)));
    }
    if fp.median_shape.iter().any(|&e| e < 8) {
        warnings.push(format!(
            "median shape {:?} has an axis below 8; using a single-stage plan",
            fp.median_shape
        ));
        let mut plan = NetworkPlan::new(fp.median_shape.clone(), vec![0; fp.dims], fp.n_classes, cfg.variant);
        plan.base_channels = cfg.base_channels;
        plan.in_channels = fp.in_channels;
        plan.validate()?;
        return Ok(PlanOutcome { plan, warnings });
    }

    let mut plan = plan_for_patch(fp, cfg, fp.median_shape.clone());
    while estimate_activation_bytes(&plan) > cfg.memory_budget {
        // shrink the largest axis by one divisibility step
        let (axis, _) = plan
            .patch
            .iter()
            .enumerate()
            .max_by_key(|&(a, &e)| (e, std::cmp::Reverse(a)))
            .expect("at least one axis");
        let step = 1usize << plan.pooling[axis];
        if plan.patch[axis] <= 8.max(step) {
            return Err(Error::Plan(format!(
                "memory budget of {} bytes cannot fit even patch {:?} at batch 2",
                cfg.memory_budget, plan.patch
            )));
        }
        let mut patch = plan.patch.clone();
        patch[axis] -= step;
        plan = plan_for_patch(fp, cfg, patch);
    }

    let patch_vox: usize = plan.patch.iter().product();
    let data_cap = ((fp.total_voxels as f64 * MAX_BATCH_DATASET_FRACTION) / patch_vox as f64).floor() as usize;
    let per_item = estimate_activation_bytes(&plan) / plan.batch as u64;
    let fit = (cfg.memory_budget / per_item.max(1)) as usize;
    plan.batch = fit.min(data_cap).max(2);
    plan.validate()?;
    Ok(PlanOutcome { plan, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fingerprint(shape: &[usize]) -> DatasetFingerprint {
        DatasetFingerprint {
            dims: shape.len(),
            modality: "MR".into(),
            in_channels: 1,
            n_classes: 3,
            n_train: 10,
            total_voxels: 10 * shape.iter().product::<usize>(),
            median_shape: shape.to_vec(),
            median_spacing: vec![1.0; shape.len()],
            min_spacing: vec![1.0; shape.len()],
            max_spacing: vec![1.0; shape.len()],
            percentile_00_5: 0.0,
            percentile_99_5: 1.0,
            mean: 0.5,
            std: 0.1,
        }
    }

    #[test]
    fn rule_applied_once_and_small_axes() {
        assert_eq!(pooling_for(&[8, 8]), vec![1, 1]);
        assert_eq!(pooling_for(&[64, 64]), vec![4, 4]);
        assert_eq!(pooling_for(&[7, 7]), vec![0, 0]);
        assert_eq!(pooling_for(&[4096, 4096]), vec![7, 7]);
    }

    #[test]
    fn reference_configurations() {
        assert_eq!(pooling_for(&[48, 160, 224]), vec![3, 5, 5]);
        assert_eq!(pooling_for(&[320, 320]), vec![6, 6]);
        assert_eq!(pooling_for(&[384, 640]), vec![6, 6]);
        assert_eq!(pooling_for(&[512, 512]), vec![7, 7]);
    }

    #[test]
    fn plans_satisfy_invariants() {
        let cfg = PlannerCfg::default();
        for shape in [vec![64, 64], vec![100, 37], vec![30, 90, 70], vec![9, 200]] {
            let out = plan_configuration(&fingerprint(&shape), &cfg).unwrap();
            out.plan.validate().unwrap();
            assert!(out.plan.batch >= 2);
            assert!(estimate_activation_bytes(&out.plan) <= cfg.memory_budget || out.plan.batch == 2);
        }
    }

    #[test]
    fn budget_shrinks_largest_axis_first() {
        let fp = fingerprint(&[64, 256]);
        let roomy = plan_configuration(&fp, &PlannerCfg::default()).unwrap().plan;
        assert_eq!(roomy.patch, vec![64, 256]);
        let cfg = PlannerCfg {
            memory_budget: estimate_activation_bytes(&roomy) / 3,
            ..PlannerCfg::default()
        };
        let tight = plan_configuration(&fp, &cfg).unwrap().plan;
        assert_eq!(tight.patch[0], 64);
        assert!(tight.patch[1] < 256);
        assert!(estimate_activation_bytes(&tight) <= cfg.memory_budget);
    }

    #[test]
    fn tiny_axis_gives_single_stage_with_warning() {
        let out = plan_configuration(&fingerprint(&[6, 40]), &PlannerCfg::default()).unwrap();
        assert_eq!(out.plan.n_stages, 1);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn impossible_budget_is_a_plan_error() {
        let cfg = PlannerCfg {
            memory_budget: 10,
            ..PlannerCfg::default()
        };
        assert!(matches!(plan_configuration(&fingerprint(&[64, 64]), &cfg), Err(Error::Plan(_))));
    }

    #[test]
    fn planning_is_pure() {
        let fp = fingerprint(&[48, 96, 80]);
        let cfg = PlannerCfg::default();
        assert_eq!(plan_configuration(&fp, &cfg).unwrap(), plan_configuration(&fp, &cfg).unwrap());
    }
}
