//! Patch-based training loop with foreground oversampling and periodic checkpoints.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossCfg;
use super::optim::{sgd_step, OptimCfg, SgdState};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::network::checkpoint::Checkpoint;
use crate::network::{Network, NetworkPlan};
use crate::pipeline::manifest::SegmentationSample;
use crate::tensor::{Element, LabelMap, Tensor};

/// Generator stream used for patch sampling; network initialization uses its own.
const SAMPLER_STREAM: u64 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.umck";
pub const LOG_FILE: &str = "train.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub optim: OptimCfg,
    pub loss: LossCfg,
    pub seed: u64,
    /// Probability that a patch is centred on a foreground voxel.
    pub foreground_fraction: f64,
    /// Random flips along every spatial axis and a ±10% intensity scale.
    pub augment: bool,
    /// Save a checkpoint every this many epochs (and before the first one).
    pub checkpoint_every: Option<usize>,
    /// Directory for `train.log` and `checkpoint.umck`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            optim: OptimCfg::default(),
            loss: LossCfg::default(),
            seed: 0,
            foreground_fraction: 0.33,
            augment: false,
            checkpoint_every: None,
            out_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {}", self.epoch, self.step, self.lr, self.loss, self.dice, self.ce)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<E> {
    pub checkpoint: Checkpoint<E>,
    pub log: Vec<StepRecord>,
    /// Mean step loss of every epoch run in this call.
    pub epoch_losses: Vec<f64>,
}

/// Cuts `(C, spatial...)` / `(spatial...)` patches out of one case, padding
/// with zeros outside the image.
struct Cropper<'a> {
    sample: &'a SegmentationSample,
    foreground: Vec<usize>,
}

impl<'a> Cropper<'a> {
    fn new(sample: &'a SegmentationSample) -> Self {
        let foreground = sample
            .label
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        Self { sample, foreground }
    }

    fn start(&self, rng: &mut ChaCha8Rng, patch: &[usize], fg_fraction: f64) -> Vec<isize> {
        let spatial = self.sample.spatial();
        let centre = if !self.foreground.is_empty() && rng.random_bool(fg_fraction) {
            let mut flat = self.foreground[rng.random_range(0..self.foreground.len())];
            let mut c = vec![0usize; spatial.len()];
            for a in (0..spatial.len()).rev() {
                c[a] = flat % spatial[a];
                flat /= spatial[a];
            }
            Some(c)
        } else {
            None
        };
        (0..spatial.len())
            .map(|a| {
                let (size, p) = (spatial[a] as isize, patch[a] as isize);
                if size <= p {
                    return (size - p) / 2;
                }
                match &centre {
                    Some(c) => (c[a] as isize - p / 2).clamp(0, size - p),
                    None => rng.random_range(0..=(size - p) as usize) as isize,
                }
            })
            .collect()
    }

    fn extract<E: Element>(&self, start: &[isize], patch: &[usize], flips: &[bool], scale: f64, image: &mut Vec<E>, label: &mut Vec<u8>) {
        let spatial = self.sample.spatial();
        let vox: usize = patch.iter().product();
        let src_vox: usize = spatial.iter().product();
        let channels = self.sample.image.shape()[0];
        let src_img = self.sample.image.data();
        let src_lab = self.sample.label.data();
        let mut idx = vec![0usize; patch.len()];
        let mut offsets = Vec::with_capacity(vox);
        for _ in 0..vox {
            let mut off = Some(0usize);
            for a in 0..patch.len() {
                let i = if flips[a] { patch[a] - 1 - idx[a] } else { idx[a] };
                let s = start[a] + i as isize;
                off = match off {
                    Some(o) if s >= 0 && (s as usize) < spatial[a] => Some(o * spatial[a] + s as usize),
                    _ => None,
                };
            }
            offsets.push(off);
            for a in (0..patch.len()).rev() {
                idx[a] += 1;
                if idx[a] < patch[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        for c in 0..channels {
            let plane = &src_img[c * src_vox..(c + 1) * src_vox];
            image.extend(offsets.iter().map(|o| match o {
                Some(o) => E::from_f64(plane[*o] as f64 * scale),
                None => E::ZERO,
            }));
        }
        label.extend(offsets.iter().map(|o| o.map_or(0, |o| src_lab[o])));
    }
}

fn draw_batch<E: Element>(
    croppers: &[Cropper<'_>],
    plan: &NetworkPlan,
    cfg: &TrainCfg,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, LabelMap)> {
    let mut image = Vec::new();
    let mut label = Vec::new();
    for _ in 0..plan.batch {
        let case = &croppers[rng.random_range(0..croppers.len())];
        let start = case.start(rng, &plan.patch, cfg.foreground_fraction);
        let (flips, scale) = if cfg.augment {
            let flips = (0..plan.dims).map(|_| rng.random_bool(0.5)).collect();
            (flips, rng.random_range(0.9..1.1))
        } else {
            (vec![false; plan.dims], 1.0)
        };
        case.extract(&start, &plan.patch, &flips, scale, &mut image, &mut label);
    }
    let mut shape = vec![plan.batch, plan.in_channels];
    shape.extend(&plan.patch);
    let image = Tensor::from_vec(&shape, image)?;
    shape.remove(1);
    Ok((image, LabelMap::from_vec(&shape, label)?))
}

fn check_samples(plan: &NetworkPlan, samples: &[SegmentationSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("training needs at least one case".into()));
    }
    for s in samples {
        if s.image.rank() != plan.dims + 1 || s.image.shape()[0] != plan.in_channels {
            return Err(Error::Dataset(format!(
                "case {}: image {:?} does not match plan ({} channels, {} spatial axes)",
                s.id,
                s.image.shape(),
                plan.in_channels,
                plan.dims
            )));
        }
        if let Some(&bad) = s.label.data().iter().find(|&&v| v as usize >= plan.n_classes) {
            return Err(Error::Dataset(format!("case {}: label {bad} >= n_classes {}", s.id, plan.n_classes)));
        }
    }
    Ok(())
}

/// Trains a freshly initialized network.
pub fn train<E: Element>(plan: &NetworkPlan, samples: &[SegmentationSample], cfg: &TrainCfg) -> Result<TrainOutcome<E>> {
    train_observed(plan, samples, cfg, None, &mut |_, _| {})
}

/// Trains from scratch or continues from `resume`, calling `observer(epoch, mean_loss)`
/// after every epoch once its checkpoint (if any) is on disk.
pub fn train_observed<E: Element>(
    plan: &NetworkPlan,
    samples: &[SegmentationSample],
    cfg: &TrainCfg,
    resume: Option<Checkpoint<E>>,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome<E>> {
    plan.validate()?;
    check_samples(plan, samples)?;
    let mut net = Network::<E>::build(plan, cfg.seed)?;
    let mut state = SgdState::new(net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM);
    let mut first_epoch = 0;
    if let Some(ck) = resume {
        if ck.plan != *plan {
            return Err(Error::Plan("checkpoint plan differs from the requested plan".into()));
        }
        if ck.seed != cfg.seed {
            return Err(Error::Plan(format!("checkpoint seed {} differs from requested seed {}", ck.seed, cfg.seed)));
        }
        net.load_params(ck.params)?;
        state.momentum = ck.momentum;
        rng.set_word_pos(ck.rng_word_pos);
        first_epoch = ck.epoch;
    }

    let ck_path = cfg.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(first_epoch > 0)
                .truncate(first_epoch == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let snapshot = |net: &Network<E>, state: &SgdState<E>, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        plan: plan.clone(),
        params: net.params().clone(),
        momentum: state.momentum.clone(),
        epoch,
        seed: cfg.seed,
        rng_word_pos: rng.get_word_pos(),
    };
    let save_every = cfg.checkpoint_every.filter(|&n| n > 0);
    let mut last_good: Option<PathBuf> = None;
    if let (Some(_), Some(path)) = (save_every, &ck_path) {
        snapshot(&net, &state, &rng, first_epoch).save(path)?;
        last_good = Some(path.clone());
    }

    let croppers: Vec<Cropper> = samples.iter().map(Cropper::new).collect();
    let steps = cfg.optim.iterations_per_epoch.unwrap_or(samples.len().div_ceil(plan.batch)).max(1);
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    for epoch in first_epoch..cfg.optim.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let (image, target) = draw_batch::<E>(&croppers, plan, cfg, &mut rng)?;
            let result = (|| {
                let mut g = Graph::new();
                let p = net.params().bind(&mut g, true);
                let x = g.constant(image);
                let probs = net.forward(&mut g, &p, x)?;
                let loss = g.dice_ce_loss(probs, &target, &cfg.loss)?;
                let terms = g.loss_terms(loss).expect("loss node");
                if !terms.total.is_finite() {
                    return Err(Error::Numeric(format!("loss is {}", terms.total)));
                }
                g.backward(loss)?;
                let grads: Vec<Option<&[E]>> = p.vars().iter().map(|&v| g.grad(v)).collect();
                sgd_step(net.params_mut(), &grads, &mut state, &cfg.optim, epoch)?;
                Ok(terms)
            })();
            let terms = result.map_err(|e| match e {
                Error::Numeric(m) => {
                    let kept = match &last_good {
                        Some(p) => format!("last good checkpoint kept at {}", p.display()),
                        None => "no checkpoint was written".into(),
                    };
                    Error::Numeric(format!("epoch {epoch} step {step}: {m}; {kept}"))
                }
                other => other,
            })?;
            let rec = StepRecord {
                epoch,
                step: epoch * steps + step,
                lr: cfg.optim.lr_at(epoch),
                loss: terms.total,
                dice: terms.dice,
                ce: terms.ce,
            };
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{rec}").map_err(|e| Error::io(&*path, e))?;
            }
            total += terms.total;
            log.push(rec);
        }
        let mean = total / steps as f64;
        epoch_losses.push(mean);
        if let (Some(n), Some(path)) = (save_every, &ck_path) {
            if (epoch + 1) % n == 0 {
                snapshot(&net, &state, &rng, epoch + 1).save(path)?;
                last_good = Some(path.clone());
            }
        }
        observer(epoch, mean);
    }
    let checkpoint = snapshot(&net, &state, &rng, cfg.optim.epochs.max(first_epoch));
    if let Some(path) = &ck_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;
    use crate::train::loss::dice_ce_terms;

    fn plan(variant: Variant) -> NetworkPlan {
        let mut p = NetworkPlan::new(vec![16, 16], vec![2, 2], 2, variant);
        p.base_channels = 4;
        p
    }

    fn disk_sample(id: &str, r: f64) -> SegmentationSample {
        let mut img = vec![0f32; 256];
        let mut lab = vec![0u8; 256];
        for y in 0..16 {
            for x in 0..16 {
                let d = ((y as f64 - 7.5).powi(2) + (x as f64 - 7.5).powi(2)).sqrt();
                if d < r {
                    img[y * 16 + x] = 1.0;
                    lab[y * 16 + x] = 1;
                } else {
                    img[y * 16 + x] = -1.0;
                }
            }
        }
        SegmentationSample {
            id: id.into(),
            image: Tensor::from_vec(&[1, 16, 16], img).unwrap(),
            label: LabelMap::from_vec(&[16, 16], lab).unwrap(),
            spacing: vec![1.0, 1.0],
        }
    }

    fn cfg(epochs: usize) -> TrainCfg {
        TrainCfg {
            optim: OptimCfg {
                epochs,
                ..OptimCfg::default()
            },
            ..TrainCfg::default()
        }
    }

    #[test]
    fn patch_extraction_pads_and_flips() {
        let mut s = disk_sample("a", 3.0);
        s.image = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.label = LabelMap::from_vec(&[2, 2], vec![0, 1, 1, 0]).unwrap();
        let c = Cropper::new(&s);
        let (mut img, mut lab) = (Vec::<f64>::new(), Vec::new());
        c.extract(&[-1, 0], &[3, 2], &[false, true], 1.0, &mut img, &mut lab);
        assert_eq!(img, vec![0.0, 0.0, 2.0, 1.0, 4.0, 3.0]);
        assert_eq!(lab, vec![0, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn foreground_oversampling_centres_on_foreground() {
        let mut lab = vec![0u8; 64 * 64];
        lab[50 * 64 + 60] = 1;
        let s = SegmentationSample {
            id: "f".into(),
            image: Tensor::zeros(&[1, 64, 64]),
            label: LabelMap::from_vec(&[64, 64], lab).unwrap(),
            spacing: vec![1.0, 1.0],
        };
        let c = Cropper::new(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = c.start(&mut rng, &[16, 16], 1.0);
        assert_eq!(start, vec![42, 48]);
        let hits = (0..1000)
            .filter(|_| {
                let st = c.start(&mut rng, &[16, 16], 0.33);
                (st[0]..st[0] + 16).contains(&50) && (st[1]..st[1] + 16).contains(&60)
            })
            .count();
        // a uniform start in 0..=48 covers row 50 for 14 values and column 60 for 4
        let expected = 1000.0 * (0.33 + 0.67 * 56.0 / 2401.0);
        assert!((hits as f64 - expected).abs() < 60.0, "{hits} vs {expected}");
    }

    #[test]
    fn initial_loss_is_near_chance_level() {
        let samples = [disk_sample("a", 5.0), disk_sample("b", 4.0)];
        let plan = plan(Variant::Enc);
        let net = Network::<f64>::build(&plan, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let croppers: Vec<Cropper> = samples.iter().map(Cropper::new).collect();
        let (image, target) = draw_batch::<f64>(&croppers, &plan, &cfg(1), &mut rng).unwrap();
        let probs = net.predict(&image).unwrap();
        let terms = dice_ce_terms(&probs, &target, &LossCfg::default()).unwrap();
        // uniform prediction: CE = ln K; class c Dice = 2 n_c / (N + K n_c)
        let k = 2.0f64;
        let n = target.len() as f64;
        let mean_dice = (0..2u8)
            .map(|c| {
                let nc = target.data().iter().filter(|&&v| v == c).count() as f64;
                2.0 * nc / (n + k * nc)
            })
            .sum::<f64>()
            / k;
        let chance = k.ln() + 1.0 - mean_dice;
        assert!(terms.total > chance / 1.5 && terms.total < chance * 1.5, "{} vs {chance}", terms.total);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let samples = [disk_sample("a", 5.0)];
        let mut c = cfg(60);
        c.optim.iterations_per_epoch = Some(2);
        let out = train::<f32>(&plan(Variant::Enc), &samples, &c).unwrap();
        let first = out.log[0].loss;
        let last = out.log.last().unwrap().loss;
        assert!(last < 0.05 * first, "{first} -> {last}");
        assert_eq!(out.epoch_losses.len(), 60);
        assert_eq!(out.checkpoint.epoch, 60);
    }

    #[test]
    fn runs_are_bit_identical() {
        let samples = [disk_sample("a", 5.0), disk_sample("b", 3.0)];
        let mut c = cfg(3);
        c.augment = true;
        let a = train::<f32>(&plan(Variant::Bot), &samples, &c).unwrap();
        let b = train::<f32>(&plan(Variant::Bot), &samples, &c).unwrap();
        assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
        let text = |o: &TrainOutcome<f32>| o.log.iter().map(|r| r.to_string()).collect::<Vec<_>>();
        assert_eq!(text(&a), text(&b));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let samples = [disk_sample("a", 5.0), disk_sample("b", 3.0)];
        let mut c = cfg(4);
        c.augment = true;
        c.out_dir = Some(dir.path().to_path_buf());
        c.checkpoint_every = Some(1);
        let mid = dir.path().join("mid.umck");
        let full = train_observed::<f32>(&plan(Variant::Enc), &samples, &c, None, &mut |e, _| {
            if e == 1 {
                std::fs::copy(dir.path().join(CHECKPOINT_FILE), &mid).unwrap();
            }
        })
        .unwrap();
        let ck = Checkpoint::<f32>::load(&mid).unwrap();
        assert_eq!(ck.epoch, 2);
        c.out_dir = None;
        let rest = train_observed::<f32>(&plan(Variant::Enc), &samples, &c, Some(ck), &mut |_, _| {}).unwrap();
        assert_eq!(rest.log, full.log[full.log.len() - rest.log.len()..]);
        assert_eq!(rest.checkpoint.encode(), full.checkpoint.encode());
        let mut other = Checkpoint::<f32>::load(&mid).unwrap();
        other.seed = 99;
        assert!(train_observed::<f32>(&plan(Variant::Enc), &samples, &c, Some(other), &mut |_, _| {}).is_err());
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let samples = [disk_sample("a", 5.0)];
        let mut c = cfg(2);
        c.out_dir = Some(dir.path().to_path_buf());
        c.checkpoint_every = Some(1);
        let out = train::<f32>(&plan(Variant::CnnBaseline), &samples, &c).unwrap();
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), out.log.len());
        assert_eq!(lines[0].split(' ').count(), 6);
        let back = Checkpoint::<f32>::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(back, out.checkpoint);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = disk_sample("nan", 5.0);
        bad.image.data_mut()[0] = f32::NAN;
        let mut c = cfg(2);
        c.out_dir = Some(dir.path().to_path_buf());
        c.checkpoint_every = Some(1);
        let err = train::<f32>(&plan(Variant::Enc), &[bad], &c).unwrap_err();
        assert!(err.is_numeric(), "{err}");
        assert!(err.to_string().contains("last good checkpoint"));
        let kept = Checkpoint::<f32>::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(kept.epoch, 0);
    }

    #[test]
    fn rejects_mismatched_samples() {
        let mut s = disk_sample("x", 3.0);
        s.label.data_mut()[0] = 9;
        let err = train::<f32>(&plan(Variant::Enc), &[s], &cfg(1)).unwrap_err();
        assert!(err.to_string().contains("case x"));
        assert!(train::<f32>(&plan(Variant::Enc), &[], &cfg(1)).is_err());
    }
}
