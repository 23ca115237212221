//! Instance maps from interior/boundary predictions and instance-level F1.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const BACKGROUND: u8 = 0;
pub const INTERIOR: u8 = 1;
pub const BOUNDARY: u8 = 2;

/// 2D instance ids, 0 for background.
pub type InstanceMap = Tensor<u32>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCfg {
    /// Maximum path length (in boundary pixels) from a component to a boundary pixel it claims.
    pub radius: usize,
    /// Instances with fewer pixels are removed after boundary assignment.
    pub min_size: usize,
}

impl Default for InstanceCfg {
    fn default() -> Self {
        Self { radius: 2, min_size: 4 }
    }
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| (ny as usize, nx as usize))
    })
}

/// Converts a `{background, interior, boundary}` map into instances.
///
/// Interior pixels are grouped into 4-connected components; boundary pixels are
/// then claimed by the nearest component along 4-connected paths through boundary
/// pixels of length at most `radius` (ties go to the component reached first in
/// raster order). Components below `min_size` are dropped and the rest renumbered
/// `1..` in raster order of their first pixel.
pub fn instances_from_semantic(map: &LabelMap, cfg: &InstanceCfg) -> Result<InstanceMap> {
    let [h, w] = map.shape() else {
        return Err(Error::dim("instances_from_semantic", format!("expected a 2D map, got {:?}", map.shape())));
    };
    let (h, w) = (*h, *w);
    let m = map.data();
    let mut ids = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if m[start] != INTERIOR || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for (ny, nx) in neighbors(p / w, p % w, h, w) {
                let q = ny * w + nx;
                if m[q] == INTERIOR && ids[q] == 0 {
                    ids[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }

    // multi-source BFS from all interior pixels into boundary pixels
    let mut dist = vec![usize::MAX; h * w];
    for (p, &id) in ids.iter().enumerate() {
        if id != 0 {
            dist[p] = 0;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        if dist[p] == cfg.radius {
            continue;
        }
        for (ny, nx) in neighbors(p / w, p % w, h, w) {
            let q = ny * w + nx;
            if m[q] == BOUNDARY && dist[q] == usize::MAX {
                dist[q] = dist[p] + 1;
                ids[q] = ids[p];
                queue.push_back(q);
            }
        }
    }

    let mut sizes = vec![0usize; next as usize + 1];
    for &id in &ids {
        sizes[id as usize] += 1;
    }
    let mut renumber = vec![0u32; next as usize + 1];
    let mut kept = 0u32;
    for id in ids.iter_mut() {
        if *id == 0 {
            continue;
        }
        let old = *id as usize;
        if sizes[old] < cfg.min_size {
            *id = 0;
            continue;
        }
        if renumber[old] == 0 {
            kept += 1;
            renumber[old] = kept;
        }
        *id = renumber[old];
    }
    Tensor::from_vec(&[h, w], ids)
}

/// Number of distinct nonzero ids.
pub fn count_instances(map: &InstanceMap) -> usize {
    let mut seen: Vec<u32> = map.data().iter().copied().filter(|&v| v != 0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// Greedy one-to-one matching by descending IoU; pairs below `iou_threshold` never match.
/// Two empty maps score 1.0 on all three measures.
pub fn f1_instance(pred: &InstanceMap, gt: &InstanceMap, iou_threshold: f64) -> Result<F1Score> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "f1_instance",
            format!("shapes {:?} and {:?} differ", pred.shape(), gt.shape()),
        ));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::contract("f1_instance", format!("IoU threshold {iou_threshold} not in (0, 1]")));
    }
    let mut area_p: HashMap<u32, usize> = HashMap::new();
    let mut area_g: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p != 0 {
            *area_p.entry(p).or_default() += 1;
        }
        if g != 0 {
            *area_g.entry(g).or_default() += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let (n_pred, n_gt) = (area_p.len(), area_g.len());
    if n_pred == 0 && n_gt == 0 {
        return Ok(F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            true_positives: 0,
            n_pred,
            n_gt,
        });
    }
    let mut pairs: Vec<(f64, u32, u32)> = inter
        .iter()
        .map(|(&(p, g), &i)| (i as f64 / (area_p[&p] + area_g[&g] - i) as f64, p, g))
        .filter(|&(iou, _, _)| iou >= iou_threshold)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = Vec::new();
    let mut used_g = Vec::new();
    for (_, p, g) in pairs {
        if !used_p.contains(&p) && !used_g.contains(&g) {
            used_p.push(p);
            used_g.push(g);
        }
    }
    let tp = used_p.len();
    let ratio = |n: usize| if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    let (precision, recall) = (ratio(n_pred), ratio(n_gt));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        precision,
        recall,
        f1,
        true_positives: tp,
        n_pred,
        n_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: &[&str]) -> LabelMap {
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| match b {
                b'.' => BACKGROUND,
                b'i' => INTERIOR,
                _ => BOUNDARY,
            }))
            .collect();
        LabelMap::from_vec(&[rows.len(), w], data).unwrap()
    }

    #[test]
    fn one_blob_is_one_instance() {
        let m = map(&["......", ".bbbb.", ".biib.", ".biib.", ".bbbb.", "......"]);
        let inst = instances_from_semantic(&m, &InstanceCfg::default()).unwrap();
        assert_eq!(count_instances(&inst), 1);
        assert_eq!(inst.data().iter().filter(|&&v| v == 1).count(), 16);
    }

    #[test]
    fn ridge_separates_two_blobs() {
        let m = map(&["iiibiii", "iiibiii", "iiibiii"]);
        let inst = instances_from_semantic(&m, &InstanceCfg::default()).unwrap();
        assert_eq!(count_instances(&inst), 2);
    }

    #[test]
    fn touching_cells_fixture() {
        // two 8x4 cells sharing an edge between columns 4 and 5
        let m = map(&[
            "..........",
            ".bbbbbbbb.",
            ".biibbiib.",
            ".biibbiib.",
            ".biibbiib.",
            ".biibbiib.",
            ".biibbiib.",
            ".biibbiib.",
            ".bbbbbbbb.",
            "..........",
        ]);
        let cfg = InstanceCfg { radius: 2, min_size: 1 };
        let inst = instances_from_semantic(&m, &cfg).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let want = match (y, x) {
                    (1..=8, 1..=4) => 1,
                    (1..=8, 5..=8) => 2,
                    _ => 0,
                };
                assert_eq!(inst.get(&[y, x]), want, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn small_components_are_removed_and_ids_compacted() {
        let m = map(&["i.iii", "..iii"]);
        let inst = instances_from_semantic(&m, &InstanceCfg { radius: 2, min_size: 2 }).unwrap();
        assert_eq!(inst.data(), &[0, 0, 1, 1, 1, 0, 0, 1, 1, 1]);
    }

    fn ids(shape: &[usize], v: Vec<u32>) -> InstanceMap {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn f1_fixtures() {
        let gt = ids(&[1, 6], vec![1, 1, 0, 2, 2, 0]);
        assert_eq!(f1_instance(&gt, &gt, 0.5).unwrap().f1, 1.0);
        let none = ids(&[1, 6], vec![0; 6]);
        assert_eq!(f1_instance(&none, &gt, 0.5).unwrap().f1, 0.0);
        let one = ids(&[1, 6], vec![7, 7, 0, 0, 0, 0]);
        let s = f1_instance(&one, &gt, 0.5).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_instance(&none, &none, 0.5).unwrap().f1, 1.0);
        assert!(f1_instance(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn matching_is_one_to_one() {
        // one prediction covering both ground-truth cells matches neither at 0.5
        let gt = ids(&[1, 4], vec![1, 1, 2, 2]);
        let pred = ids(&[1, 4], vec![1, 1, 1, 1]);
        assert_eq!(f1_instance(&pred, &gt, 0.5).unwrap().true_positives, 1);
        assert_eq!(f1_instance(&pred, &gt, 0.6).unwrap().true_positives, 0);
    }

    proptest! {
        #[test]
        fn f1_ignores_relabeling(v in proptest::collection::vec(0u32..4, 16), w in proptest::collection::vec(0u32..4, 16)) {
            let a = ids(&[4, 4], v.clone());
            let b = ids(&[4, 4], w);
            let relabeled = ids(&[4, 4], v.iter().map(|&x| if x == 0 { 0 } else { 10 - x }).collect());
            let s1 = f1_instance(&a, &b, 0.5).unwrap();
            let s2 = f1_instance(&relabeled, &b, 0.5).unwrap();
            prop_assert_eq!(s1.f1, s2.f1);
            prop_assert!((0.0..=1.0).contains(&s1.f1));
        }
    }
}
