//! Central finite-difference checks of every differentiable operation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::layers::{MambaBlock, MambaBlockCfg, ResidualBlock, ResidualBlockCfg, UMambaBlock};
use crate::params::{Bindings, ParamStore};
use crate::ssm::SsmParams;
use crate::tensor::{LabelMap, Tensor};
use crate::train::loss::LossCfg;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One function of a few tensors whose gradient is checked.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `Σ out ⊙ r` with a fixed random `r`, so every output element contributes.
fn scalar_loss(case: &Case, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, seed: u64, grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let r = weights.get_or_insert_with(|| random(g.shape(out), seed, 1.0)).clone();
    let rv = g.constant(r);
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    let value = g.value(loss).data()[0];
    let mut grads = Vec::new();
    if grad {
        g.backward(loss)?;
        for &v in &vars {
            grads.push(g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]));
        }
    }
    Ok((value, grads))
}

/// Compares analytic and numeric gradients on at most `per_input` elements of each input.
pub fn check(case: &Case, per_input: usize, seed: u64) -> Result<CheckResult> {
    let mut weights = None;
    let (_, analytic) = scalar_loss(case, &case.inputs, &mut weights, seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = case.inputs.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let picks: Vec<usize> = if n <= per_input { (0..n).collect() } else { sample(&mut rng, n, per_input).into_vec() };
        for j in picks {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let (fp, _) = scalar_loss(case, &inputs, &mut weights, seed, false)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let (fm, _) = scalar_loss(case, &inputs, &mut weights, seed, false)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: case.name.clone(),
        max_rel_err: worst,
        checked,
    })
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Values bounded away from zero, for checks that cross a kink at the origin.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed, 1.0).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn positive(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    random(shape, seed, 1.0).map(|v| lo + (hi - lo) * (v + 1.0) / 2.0)
}

/// A parameterized module: the inputs are `x` followed by every store tensor.
fn module_case<F>(name: &str, x: Tensor<f64>, store: ParamStore<f64>, forward: F) -> Case
where
    F: Fn(&mut Graph<f64>, &Bindings, Var) -> Result<Var> + 'static,
{
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    Case::new(name, inputs, move |g, v| forward(g, &Bindings::from_vars(v[1..].to_vec()), v[0]))
}

/// Every primitive plus the composed blocks and the loss.
pub fn suite(seed: u64) -> Vec<Case> {
    let s = move |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let mut rng = ChaCha8Rng::seed_from_u64(s(999));
    let mut cases = vec![
        Case::new("conv1d", vec![random(&[2, 2, 7], s(1), 1.0), random(&[3, 2, 3], s(2), 1.0), random(&[3], s(3), 1.0)], |g, v| {
            g.conv(v[0], v[1], Some(v[2]), &[1], &[1])
        }),
        Case::new("conv2d", vec![random(&[2, 2, 5, 6], s(4), 1.0), random(&[3, 2, 3, 3], s(5), 1.0), random(&[3], s(6), 1.0)], |g, v| {
            g.conv(v[0], v[1], Some(v[2]), &[2, 1], &[1, 1])
        }),
        Case::new("conv3d", vec![random(&[1, 2, 4, 5, 4], s(7), 1.0), random(&[2, 2, 3, 3, 3], s(8), 1.0), random(&[2], s(9), 1.0)], |g, v| {
            g.conv(v[0], v[1], Some(v[2]), &[2, 2, 1], &[1, 1, 1])
        }),
        Case::new(
            "conv_transpose2d",
            vec![random(&[2, 3, 3, 2], s(10), 1.0), random(&[3, 2, 2, 2], s(11), 1.0), random(&[2], s(12), 1.0)],
            |g, v| g.conv_transpose(v[0], v[1], Some(v[2]), &[2, 2]),
        ),
        Case::new(
            "conv_transpose3d",
            vec![random(&[1, 2, 2, 3, 2], s(13), 1.0), random(&[2, 3, 2, 1, 2], s(14), 1.0), random(&[3], s(15), 1.0)],
            |g, v| g.conv_transpose(v[0], v[1], Some(v[2]), &[2, 1, 2]),
        ),
        Case::new(
            "causal_conv1d",
            vec![random(&[2, 6, 3], s(16), 1.0), random(&[3, 4], s(17), 1.0), random(&[3], s(18), 1.0)],
            |g, v| g.causal_conv1d(v[0], v[1], v[2]),
        ),
        Case::new("linear", vec![random(&[2, 3, 4], s(19), 1.0), random(&[5, 4], s(20), 1.0), random(&[5], s(21), 1.0)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        Case::new("matmul", vec![random(&[3, 4], s(22), 1.0), random(&[4, 2], s(23), 1.0)], |g, v| g.matmul(v[0], v[1])),
        Case::new("hadamard", vec![random(&[3, 4], s(24), 1.0), random(&[3, 4], s(25), 1.0)], |g, v| g.mul(v[0], v[1])),
        Case::new("add", vec![random(&[3, 4], s(26), 1.0), random(&[3, 4], s(27), 1.0)], |g, v| g.add(v[0], v[1])),
        Case::new("leaky_relu", vec![away_from_zero(&[4, 5], s(28))], |g, v| Ok(g.leaky_relu(v[0], 0.01))),
        Case::new("silu", vec![random(&[4, 5], s(29), 3.0)], |g, v| Ok(g.silu(v[0]))),
        Case::new("softplus", vec![random(&[4, 5], s(30), 3.0)], |g, v| Ok(g.softplus(v[0]))),
        Case::new("neg_exp", vec![random(&[4, 5], s(31), 1.0)], |g, v| Ok(g.neg_exp(v[0]))),
        Case::new("softmax", vec![random(&[2, 3, 4], s(32), 2.0)], |g, v| g.softmax(v[0], 1)),
        Case::new(
            "instance_norm",
            vec![random(&[2, 3, 4, 3], s(33), 2.0), random(&[3], s(34), 1.0), random(&[3], s(35), 1.0)],
            |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
        Case::new(
            "layer_norm",
            vec![random(&[2, 5, 4], s(36), 2.0), random(&[4], s(37), 1.0), random(&[4], s(38), 1.0)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        Case::new("reshape_permute", vec![random(&[2, 3, 4], s(39), 1.0)], |g, v| {
            let r = g.reshape(v[0], &[6, 4])?;
            g.permute(r, &[1, 0])
        }),
        Case::new("concat", vec![random(&[2, 1, 3], s(40), 1.0), random(&[2, 2, 3], s(41), 1.0)], |g, v| g.concat(&[v[0], v[1]], 1)),
        Case::new(
            "selective_scan",
            vec![
                random(&[2, 9, 3], s(42), 1.0),
                positive(&[2, 9, 3], s(43), 0.01, 0.5),
                positive(&[3, 4], s(44), -2.0, -0.2),
                random(&[2, 9, 4], s(45), 1.0),
                random(&[2, 9, 4], s(46), 1.0),
                random(&[3], s(47), 1.0),
            ],
            |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], 4),
        ),
        Case::new("dice_ce_loss", vec![random(&[2, 3, 3, 4], s(48), 2.0)], move |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(s(49));
            let labels = (0..24).map(|_| rng.random_range(0..3u8)).collect();
            let target = LabelMap::from_vec(&[2, 3, 4], labels)?;
            let p = g.softmax(v[0], 1)?;
            g.dice_ce_loss(p, &target, &LossCfg::default())
        }),
    ];

    let mut store = ParamStore::new();
    let ssm = SsmParams::new(&mut store, &mut rng, "ssm", 3, 4, 4);
    cases.push(module_case("ssm_params", random(&[2, 7, 3], s(50), 1.0), store, move |g, p, x| ssm.forward(g, p, x)));

    let mut store = ParamStore::new();
    let cfg = ResidualBlockCfg {
        channels_in: 2,
        channels_out: 3,
        stride: vec![2, 1],
    };
    let res = ResidualBlock::new(&mut store, &mut rng, "res", cfg);
    cases.push(module_case("residual_block", random(&[2, 2, 6, 5], s(51), 1.0), store, move |g, p, x| {
        res.forward(g, p, x)
    }));

    let mut store = ParamStore::new();
    let mcfg = MambaBlockCfg {
        channels: 3,
        expand: 2,
        state: 4,
        conv_width: 4,
        chunk: 4,
    };
    let mamba = MambaBlock::new(&mut store, &mut rng, "mamba", mcfg.clone());
    cases.push(module_case("mamba_block", random(&[2, 10, 3], s(52), 1.0), store, move |g, p, x| {
        mamba.forward(g, p, x)
    }));

    let mut store = ParamStore::new();
    let cfg = ResidualBlockCfg {
        channels_in: 2,
        channels_out: 3,
        stride: vec![1, 1],
    };
    let um = UMambaBlock::new(&mut store, &mut rng, "umamba", cfg, mcfg, true);
    cases.push(module_case("umamba_block", random(&[2, 2, 4, 3], s(53), 1.0), store, move |g, p, x| {
        um.forward(g, p, x)
    }));
    cases
}

/// Runs the whole suite, sampling at most `per_input` elements per input tensor.
pub fn run_suite(seed: u64, per_input: usize) -> Result<Vec<CheckResult>> {
    suite(seed).iter().map(|c| check(c, per_input, seed)).collect()
}
