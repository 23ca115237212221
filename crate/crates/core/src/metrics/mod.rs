//! Overlap and surface metrics on binary masks, plus instance-level scoring.

pub mod instance;
pub mod report;

pub use instance::{f1_instance, instances_from_semantic, F1Score, InstanceCfg, InstanceMap};
pub use report::{EvalReport, InstanceCase, SemanticCase};

use crate::error::{Error, Result};
use crate::tensor::{strides, LabelMap, Tensor};

/// Binary mask of voxels equal to `class`.
pub fn class_mask(labels: &LabelMap, class: u8) -> Tensor<bool> {
    labels.map(|v| v == class)
}

fn same_shape<A, B>(op: &'static str, a: &Tensor<A>, b: &Tensor<B>) -> Result<()>
where
    A: Copy,
    B: Copy,
{
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, with 1.0 when both masks are empty.
pub fn dsc(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Foreground voxels with a face neighbor that is background or outside the grid.
pub fn boundary(mask: &Tensor<bool>) -> Vec<Vec<usize>> {
    let shape = mask.shape();
    let st = strides(shape);
    let mut out = Vec::new();
    let mut idx = vec![0usize; shape.len()];
    for (flat, &m) in mask.data().iter().enumerate() {
        let mut rem = flat;
        for (a, s) in st.iter().enumerate() {
            idx[a] = rem / s;
            rem %= s;
        }
        if !m {
            continue;
        }
        let on_edge = (0..shape.len()).any(|a| {
            idx[a] == 0 || idx[a] + 1 == shape[a] || !mask.data()[flat - st[a]] || !mask.data()[flat + st[a]]
        });
        if on_edge {
            out.push(idx.clone());
        }
    }
    out
}

fn within(from: &[Vec<usize>], to: &[Vec<usize>], spacing: &[f64], tau: f64) -> usize {
    let tau2 = tau * tau;
    from.iter()
        .filter(|p| {
            to.iter().any(|q| {
                let d2: f64 = p
                    .iter()
                    .zip(q.iter())
                    .zip(spacing)
                    .map(|((&a, &b), &s)| {
                        let d = (a as f64 - b as f64) * s;
                        d * d
                    })
                    .sum();
                d2 <= tau2
            })
        })
        .count()
}

/// Normalized surface distance at tolerance `tau` (physical units given `spacing`).
pub fn nsd(pred: &Tensor<bool>, gt: &Tensor<bool>, spacing: &[f64], tau: f64) -> Result<f64> {
    same_shape("nsd", pred, gt)?;
    if spacing.len() != pred.rank() || spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::contract(
            "nsd",
            format!("spacing {spacing:?} must be positive with one entry per axis of {:?}", pred.shape()),
        ));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::contract("nsd", format!("tolerance {tau} must be positive")));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let hits = within(&bp, &bg, spacing, tau) + within(&bg, &bp, spacing, tau);
    Ok(hits as f64 / (bp.len() + bg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(shape: &[usize], on: &[(usize, usize)]) -> Tensor<bool> {
        let mut t = Tensor::full(shape, false);
        for &(y, x) in on {
            let o = t.offset(&[y, x]);
            t.data_mut()[o] = true;
        }
        t
    }

    fn square(y0: usize, x0: usize) -> Vec<(usize, usize)> {
        (y0..y0 + 3).flat_map(|y| (x0..x0 + 3).map(move |x| (y, x))).collect()
    }

    #[test]
    fn dsc_fixtures() {
        let a = mask(&[4, 4], &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(&[4, 4], &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        let far = mask(&[4, 4], &[(3, 3)]);
        let empty = Tensor::full(&[4, 4], false);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &far).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(dsc(&a, &Tensor::full(&[2, 8], false)).is_err());
    }

    #[test]
    fn offset_squares_golden() {
        // 3x3 squares shifted by one column: every boundary pixel of either square is
        // within one pixel of the other's boundary; only the 4 shared boundary pixels
        // of each square are at distance zero.
        let p = mask(&[7, 7], &square(2, 2));
        let g = mask(&[7, 7], &square(2, 3));
        assert_eq!(boundary(&p).len(), 8);
        assert_eq!(nsd(&p, &g, &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&p, &g, &[1.0, 1.0], 0.5).unwrap(), 0.5);
        // doubling the column spacing leaves only the 4 shared pixels and the
        // one row-adjacent pixel of each boundary in tolerance: (4 + 1) * 2 of 16
        assert_eq!(nsd(&p, &g, &[1.0, 2.0], 1.0).unwrap(), 10.0 / 16.0);
    }

    #[test]
    fn nsd_conventions() {
        let p = mask(&[5, 5], &[(0, 0)]);
        let q = mask(&[5, 5], &[(4, 4)]);
        let empty = Tensor::full(&[5, 5], false);
        assert_eq!(nsd(&p, &p, &[1.0, 1.0], 0.1).unwrap(), 1.0);
        assert_eq!(nsd(&p, &q, &[1.0, 1.0], 100.0).unwrap(), 1.0);
        assert_eq!(nsd(&p, &empty, &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&empty, &empty, &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert!(nsd(&p, &q, &[1.0, 1.0], 0.0).is_err());
        assert!(nsd(&p, &q, &[1.0], 1.0).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (Tensor<bool>, Tensor<bool>, i64, i64)> {
        (3usize..8, 3usize..8).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
                -2i64..3,
                -2i64..3,
            )
                .prop_map(move |(a, b, dy, dx)| {
                    (
                        Tensor::from_vec(&[h, w], a).unwrap(),
                        Tensor::from_vec(&[h, w], b).unwrap(),
                        dy,
                        dx,
                    )
                })
        })
    }

    /// Embeds a mask at an offset inside a larger empty canvas.
    fn translate(m: &Tensor<bool>, dy: i64, dx: i64) -> Tensor<bool> {
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let mut out = Tensor::full(&[h + 6, w + 6], false);
        for y in 0..h {
            for x in 0..w {
                let o = out.offset(&[(y as i64 + 3 + dy) as usize, (x as i64 + 3 + dx) as usize]);
                out.data_mut()[o] = m.get(&[y, x]);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn symmetry_and_translation((a, b, dy, dx) in arb_pair()) {
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            let s = [1.0, 1.0];
            prop_assert_eq!(nsd(&a, &b, &s, 1.5).unwrap(), nsd(&b, &a, &s, 1.5).unwrap());
            let (ta, tb) = (translate(&a, 0, 0), translate(&b, 0, 0));
            let (sa, sb) = (translate(&a, dy, dx), translate(&b, dy, dx));
            prop_assert_eq!(dsc(&ta, &tb).unwrap(), dsc(&sa, &sb).unwrap());
            prop_assert_eq!(nsd(&ta, &tb, &s, 1.5).unwrap(), nsd(&sa, &sb, &s, 1.5).unwrap());
        }

        #[test]
        fn scores_are_unit_interval((a, b, _dy, _dx) in arb_pair(), tau in 0.1f64..5.0) {
            let d = dsc(&a, &b).unwrap();
            let n = nsd(&a, &b, &[1.0, 1.0], tau).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&n));
        }
    }
}
