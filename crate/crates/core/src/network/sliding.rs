//! Sliding-window inference over images larger than the training patch.

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{Element, LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Per-axis Gaussian with sigma = patch / 8, peak 1 at the window center.
    Gaussian,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingCfg {
    /// Fraction of the patch shared by neighboring windows, in [0, 1).
    pub overlap: f64,
    pub weighting: Weighting,
}

impl Default for SlidingCfg {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            weighting: Weighting::Gaussian,
        }
    }
}

pub struct SlidingOutput<E> {
    /// `(K, spatial...)`, normalized over `K`.
    pub probs: Tensor<E>,
    pub labels: LabelMap,
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Window start offsets covering `size` with windows of `patch`.
pub fn window_starts(size: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if size <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let n = (size - patch).div_ceil(step) + 1;
    let span = (size - patch) as f64;
    (0..n).map(|i| (span * i as f64 / (n - 1) as f64).round() as usize).collect()
}

fn axis_weights(patch: usize, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0; patch],
        Weighting::Gaussian => {
            let sigma = patch as f64 / 8.0;
            let center = (patch as f64 - 1.0) / 2.0;
            (0..patch)
                .map(|i| {
                    let d = i as f64 - center;
                    (-(d * d) / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        }
    }
}

/// Left-pads a shape to three axes.
fn to3(spatial: &[usize]) -> [usize; 3] {
    let mut s = [1; 3];
    s[3 - spatial.len()..].copy_from_slice(spatial);
    s
}

/// Gaussian-weighted sliding-window prediction for `image: (C_in, spatial...)`.
/// Axes shorter than the patch are reflect-padded and cropped back afterwards.
pub fn predict_sliding<E: Element>(net: &Network<E>, image: &Tensor<E>, cfg: &SlidingCfg) -> Result<SlidingOutput<E>> {
    let plan = net.plan();
    let shape = image.shape();
    if shape.len() != plan.dims + 1 || shape[0] != plan.in_channels {
        return Err(Error::dim(
            "predict_sliding",
            format!("image {shape:?} must be ({}, {} spatial axes)", plan.in_channels, plan.dims),
        ));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::contract("predict_sliding", format!("overlap {} not in [0, 1)", cfg.overlap)));
    }
    let cin = shape[0];
    let k = plan.n_classes;
    let orig = to3(&shape[1..]);
    let patch = to3(&plan.patch);
    let padded: [usize; 3] = std::array::from_fn(|a| orig[a].max(patch[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (padded[a] - orig[a]) / 2);

    // reflect-padded copy of the image
    let pvox: usize = padded.iter().product();
    let ovox: usize = orig.iter().product();
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| (0..padded[a]).map(|i| reflect(i as isize - before[a] as isize, orig[a])).collect())
        .collect();
    let mut img = vec![E::ZERO; cin * pvox];
    for c in 0..cin {
        for z in 0..padded[0] {
            for y in 0..padded[1] {
                for x in 0..padded[2] {
                    let src = ((c * orig[0] + maps[0][z]) * orig[1] + maps[1][y]) * orig[2] + maps[2][x];
                    img[((c * padded[0] + z) * padded[1] + y) * padded[2] + x] = image.data()[src];
                }
            }
        }
    }

    let w: Vec<Vec<f64>> = (0..3).map(|a| axis_weights(patch[a], cfg.weighting)).collect();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], patch[a], cfg.overlap)).collect();
    let mut windows = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                windows.push([z, y, x]);
            }
        }
    }

    let wvox: usize = patch.iter().product();
    let mut acc = vec![0.0f64; k * pvox];
    let mut wsum = vec![0.0f64; pvox];
    let mut in_shape = vec![0, cin];
    in_shape.extend(&plan.patch);
    for group in windows.chunks(plan.batch) {
        let mut batch = Vec::with_capacity(group.len() * cin * wvox);
        for o in group {
            for c in 0..cin {
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let row = ((c * padded[0] + o[0] + z) * padded[1] + o[1] + y) * padded[2] + o[2];
                        batch.extend_from_slice(&img[row..row + patch[2]]);
                    }
                }
            }
        }
        in_shape[0] = group.len();
        let probs = net.predict(&Tensor::from_vec(&in_shape, batch)?)?;
        let pd = probs.data();
        for (bi, o) in group.iter().enumerate() {
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    for x in 0..patch[2] {
                        let wt = w[0][z] * w[1][y] * w[2][x];
                        let dst = ((o[0] + z) * padded[1] + o[1] + y) * padded[2] + o[2] + x;
                        let src = (z * patch[1] + y) * patch[2] + x;
                        wsum[dst] += wt;
                        for c in 0..k {
                            acc[c * pvox + dst] += wt * pd[(bi * k + c) * wvox + src].to_f64();
                        }
                    }
                }
            }
        }
    }

    let mut probs = vec![E::ZERO; k * ovox];
    let mut labels = vec![0u8; ovox];
    for z in 0..orig[0] {
        for y in 0..orig[1] {
            for x in 0..orig[2] {
                let src = ((z + before[0]) * padded[1] + y + before[1]) * padded[2] + x + before[2];
                let dst = (z * orig[1] + y) * orig[2] + x;
                let mut best = 0;
                for c in 0..k {
                    let v = acc[c * pvox + src] / wsum[src];
                    probs[c * ovox + dst] = E::from_f64(v);
                    if v > acc[best * pvox + src] / wsum[src] {
                        best = c;
                    }
                }
                labels[dst] = best as u8;
            }
        }
    }
    let mut pshape = vec![k];
    pshape.extend(&shape[1..]);
    Ok(SlidingOutput {
        probs: Tensor::from_vec(&pshape, probs)?,
        labels: LabelMap::from_vec(&shape[1..], labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{argmax_classes, NetworkPlan, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<f64> {
        let mut plan = NetworkPlan::new(vec![16, 16], vec![2, 2], 3, Variant::Bot);
        plan.base_channels = 4;
        plan.mamba.state = 4;
        Network::build(&plan, 1).unwrap()
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(16, 16, 0.5), vec![0]);
        assert_eq!(window_starts(32, 16, 0.5), vec![0, 8, 16]);
        assert_eq!(window_starts(20, 16, 0.0), vec![0, 4]);
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
    }

    #[test]
    fn single_window_matches_forward() {
        let net = net();
        let img = noise(&[1, 16, 16], 2);
        let out = predict_sliding(&net, &img, &SlidingCfg::default()).unwrap();
        let direct = net.predict(&img.clone().reshape(&[1, 1, 16, 16]).unwrap()).unwrap();
        assert_eq!(out.labels.data(), argmax_classes(&direct).data());
        for (a, b) in out.probs.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn seams_keep_probabilities_normalized() {
        let net = net();
        let img = noise(&[1, 37, 29], 3);
        let out = predict_sliding(&net, &img, &SlidingCfg::default()).unwrap();
        assert_eq!(out.labels.shape(), &[37, 29]);
        let vox = 37 * 29;
        for v in 0..vox {
            let s: f64 = (0..3).map(|c| out.probs.data()[c * vox + v]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn small_images_are_padded_and_cropped() {
        let net = net();
        let out = predict_sliding(&net, &noise(&[1, 9, 40], 4), &SlidingCfg::default()).unwrap();
        assert_eq!(out.probs.shape(), &[3, 9, 40]);
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let mut net = net();
        // a clear class preference at the head so boundary effects cannot flip labels
        let hb = net.head_bias();
        net.params_mut().get_mut(hb).data_mut()[2] = 5.0;
        let img = Tensor::full(&[1, 48, 48], 0.3);
        let out = predict_sliding(&net, &img, &SlidingCfg::default()).unwrap();
        let l = &out.labels;
        let first = l.get(&[8, 8]);
        for y in 8..40 {
            for x in 8..40 {
                assert_eq!(l.get(&[y, x]), first);
            }
        }
    }

    #[test]
    fn bad_overlap_is_rejected() {
        let cfg = SlidingCfg {
            overlap: 1.0,
            weighting: Weighting::Uniform,
        };
        assert!(predict_sliding(&net(), &noise(&[1, 16, 16], 0), &cfg).is_err());
    }
}
