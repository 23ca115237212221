//! Encoder-decoder segmentation networks built from a [`NetworkPlan`].

pub mod checkpoint;
pub mod plan;
pub mod sliding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ResidualBlock, ResidualBlockCfg, UMambaBlock};
use crate::params::{kaiming_normal, Bindings, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub use checkpoint::Checkpoint;
pub use plan::{MambaSettings, NetworkPlan, Variant};
pub use sliding::{predict_sliding, SlidingCfg, Weighting};

#[derive(Clone, Debug)]
enum EncoderStage {
    Residual(ResidualBlock, ResidualBlock),
    UMamba(UMambaBlock),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up_w: ParamId,
    up_b: ParamId,
    stride: Vec<usize>,
    first: ResidualBlock,
    second: ResidualBlock,
}

#[derive(Clone, Debug)]
pub struct Network<E: Element> {
    plan: NetworkPlan,
    params: ParamStore<E>,
    encoder: Vec<EncoderStage>,
    /// Ordered from the deepest decoder stage to the full-resolution one.
    decoder: Vec<DecoderStage>,
    head: (ParamId, ParamId),
}

impl<E: Element> Network<E> {
    /// Validates the plan, then allocates and initializes every parameter from `seed`.
    pub fn build(plan: &NetworkPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = plan.dims;
        let mut encoder = Vec::with_capacity(plan.n_stages);
        let mut cin = plan.in_channels;
        for s in 0..plan.n_stages {
            let cout = plan.channels(s);
            let cfg = ResidualBlockCfg {
                channels_in: cin,
                channels_out: cout,
                stride: plan.stride(s),
            };
            let prefix = format!("enc{s}");
            let stage = if plan.variant.has_mamba_at(s, plan.n_stages) {
                EncoderStage::UMamba(UMambaBlock::new(
                    &mut params,
                    &mut rng,
                    &prefix,
                    cfg,
                    plan.mamba.block_cfg(cout),
                    plan.mamba.residual,
                ))
            } else {
                let second = ResidualBlockCfg {
                    channels_in: cout,
                    channels_out: cout,
                    stride: vec![1; dims],
                };
                EncoderStage::Residual(
                    ResidualBlock::new(&mut params, &mut rng, &format!("{prefix}.res0"), cfg),
                    ResidualBlock::new(&mut params, &mut rng, &format!("{prefix}.res1"), second),
                )
            };
            encoder.push(stage);
            cin = cout;
        }

        let mut decoder = Vec::new();
        for s in (0..plan.n_stages - 1).rev() {
            let (deep, shallow) = (plan.channels(s + 1), plan.channels(s));
            let stride = plan.stride(s + 1);
            let mut shape = vec![deep, shallow];
            shape.extend(&stride);
            let fan_in = deep * stride.iter().product::<usize>();
            let prefix = format!("dec{s}");
            let up_w = params.add(format!("{prefix}.up.w"), kaiming_normal(&mut rng, &shape, fan_in));
            let up_b = params.add(format!("{prefix}.up.b"), Tensor::zeros(&[shallow]));
            let first = ResidualBlock::new(
                &mut params,
                &mut rng,
                &format!("{prefix}.res0"),
                ResidualBlockCfg {
                    channels_in: 2 * shallow,
                    channels_out: shallow,
                    stride: vec![1; dims],
                },
            );
            let second = ResidualBlock::new(
                &mut params,
                &mut rng,
                &format!("{prefix}.res1"),
                ResidualBlockCfg {
                    channels_in: shallow,
                    channels_out: shallow,
                    stride: vec![1; dims],
                },
            );
            decoder.push(DecoderStage {
                up_w,
                up_b,
                stride,
                first,
                second,
            });
        }

        let c0 = plan.channels(0);
        let mut shape = vec![plan.n_classes, c0];
        shape.extend(std::iter::repeat_n(1, dims));
        let head = (
            params.add("head.w", kaiming_normal(&mut rng, &shape, c0)),
            params.add("head.b", Tensor::zeros(&[plan.n_classes])),
        );
        Ok(Self {
            plan: plan.clone(),
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.1
    }

    /// Replaces all parameter values; names and shapes must match this network's.
    pub fn load_params(&mut self, other: ParamStore<E>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, ot)) in self.params.iter().zip(other.iter()) {
            if name != oname || t.shape() != ot.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {name} {:?}, found {oname} {:?}",
                    t.shape(),
                    ot.shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let plan = &self.plan;
        if shape.len() != plan.dims + 2 {
            return Err(Error::dim(
                "network",
                format!("input {shape:?} must be (B, {}, {:?})", plan.in_channels, plan.patch),
            ));
        }
        if shape[1] != plan.in_channels {
            return Err(Error::dim(
                "network",
                format!("axis 1: expected {} input channels, got {}", plan.in_channels, shape[1]),
            ));
        }
        for (a, (&got, &want)) in shape[2..].iter().zip(&plan.patch).enumerate() {
            if got != want {
                return Err(Error::dim(
                    "network",
                    format!("axis {}: expected patch extent {want}, got {got}", a + 2),
                ));
            }
        }
        Ok(())
    }

    /// Class probabilities `(B, K, patch...)` for input `(B, C_in, patch...)`.
    pub fn forward(&self, g: &mut Graph<E>, p: &Bindings, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let shapes = self.plan.stage_shapes();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (s, stage) in self.encoder.iter().enumerate() {
            h = match stage {
                EncoderStage::Residual(a, b) => {
                    let t = a.forward(g, p, h)?;
                    b.forward(g, p, t)?
                }
                EncoderStage::UMamba(u) => u.forward(g, p, h)?,
            };
            if g.shape(h)[2..] != shapes[s][..] {
                return Err(Error::dim(
                    "network",
                    format!("stage {s} produced {:?}, plan expects {:?}", &g.shape(h)[2..], shapes[s]),
                ));
            }
            skips.push(h);
        }
        skips.pop();
        for stage in &self.decoder {
            let up = g.conv_transpose(h, p[stage.up_w], Some(p[stage.up_b]), &stage.stride)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat(&[up, skip], 1)?;
            let t = stage.first.forward(g, p, cat)?;
            h = stage.second.forward(g, p, t)?;
        }
        let logits = g.conv(h, p[self.head.0], Some(p[self.head.1]), &vec![1; self.plan.dims], &vec![0; self.plan.dims])?;
        g.softmax(logits, 1)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Index of the largest probability along axis 1 of `(B, K, spatial...)`.
pub fn argmax_classes<E: Element>(probs: &Tensor<E>) -> Tensor<u8> {
    let s = probs.shape();
    let (b, k) = (s[0], s[1]);
    let vox: usize = s[2..].iter().product();
    let d = probs.data();
    let mut out = Vec::with_capacity(b * vox);
    for bi in 0..b {
        for v in 0..vox {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * vox + v] > d[(bi * k + best) * vox + v] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    let mut shape = vec![b];
    shape.extend(&s[2..]);
    Tensor::from_vec(&shape, out).expect("shape")
}
