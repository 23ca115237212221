//! Residual convolution block, Mamba block and the hybrid U-Mamba block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, uniform_fan_in, Bindings, ParamId, ParamStore};
use crate::ssm::{SsmParams, DEFAULT_CHUNK, DEFAULT_STATE_SIZE};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// 3^d convolution + instance norm + leaky ReLU, used twice per block.
#[derive(Clone, Debug)]
struct ConvNormAct {
    w: ParamId,
    b: ParamId,
    scale: ParamId,
    shift: ParamId,
}

impl ConvNormAct {
    fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, rng: &mut R, prefix: &str, cin: usize, cout: usize, dims: usize) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(3, dims));
        let fan_in = cin * 3usize.pow(dims as u32);
        Self {
            w: store.add(format!("{prefix}.w"), kaiming_normal(rng, &shape, fan_in)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout])),
            scale: store.add(format!("{prefix}.norm.scale"), Tensor::full(&[cout], E::ONE)),
            shift: store.add(format!("{prefix}.norm.shift"), Tensor::zeros(&[cout])),
        }
    }

    fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, x: Var, stride: &[usize]) -> Result<Var> {
        let pad = vec![1; stride.len()];
        let y = g.conv(x, p[self.w], Some(p[self.b]), stride, &pad)?;
        let y = g.instance_norm(y, p[self.scale], p[self.shift], E::from_f64(NORM_EPS))?;
        Ok(g.leaky_relu(y, E::from_f64(LEAKY_SLOPE)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockCfg {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Per spatial axis; its length fixes the dimensionality.
    pub stride: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    cfg: ResidualBlockCfg,
    first: ConvNormAct,
    second: ConvNormAct,
    /// 1×1 projection when the block changes channels or resolution.
    skip: Option<(ParamId, ParamId)>,
}

impl ResidualBlock {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, rng: &mut R, prefix: &str, cfg: ResidualBlockCfg) -> Self {
        let dims = cfg.stride.len();
        let first = ConvNormAct::new(store, rng, &format!("{prefix}.conv1"), cfg.channels_in, cfg.channels_out, dims);
        let second = ConvNormAct::new(store, rng, &format!("{prefix}.conv2"), cfg.channels_out, cfg.channels_out, dims);
        let identity = cfg.channels_in == cfg.channels_out && cfg.stride.iter().all(|&s| s == 1);
        let skip = (!identity).then(|| {
            let mut shape = vec![cfg.channels_out, cfg.channels_in];
            shape.extend(std::iter::repeat_n(1, dims));
            (
                store.add(format!("{prefix}.skip.w"), kaiming_normal(rng, &shape, cfg.channels_in)),
                store.add(format!("{prefix}.skip.b"), Tensor::zeros(&[cfg.channels_out])),
            )
        });
        Self { cfg, first, second, skip }
    }

    pub fn cfg(&self) -> &ResidualBlockCfg {
        &self.cfg
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != self.cfg.stride.len() + 2 {
            return Err(Error::dim(
                "residual_block",
                format!("input {xs:?} does not have {} spatial axes", self.cfg.stride.len()),
            ));
        }
        if xs[1] != self.cfg.channels_in {
            return Err(Error::dim(
                "residual_block",
                format!("axis 1: expected {} channels, got {}", self.cfg.channels_in, xs[1]),
            ));
        }
        let h = self.first.forward(g, p, x, &self.cfg.stride)?;
        let unit = vec![1; self.cfg.stride.len()];
        let h = self.second.forward(g, p, h, &unit)?;
        let s = match self.skip {
            Some((w, b)) => g.conv(x, p[w], Some(p[b]), &self.cfg.stride, &vec![0; unit.len()])?,
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaBlockCfg {
    pub channels: usize,
    pub expand: usize,
    pub state: usize,
    pub conv_width: usize,
    pub chunk: usize,
}

impl MambaBlockCfg {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            expand: 2,
            state: DEFAULT_STATE_SIZE,
            conv_width: 4,
            chunk: DEFAULT_CHUNK,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }
}

/// Two-branch gated SSM block on `(B, L, C)` tokens.
///
/// ```text
/// branch1 = SSM(silu(causal_conv1d(in1(x))))
/// branch2 = silu(in2(x))
/// out     = out_proj(branch1 ⊙ branch2)
/// ```
#[derive(Clone, Debug)]
pub struct MambaBlock {
    cfg: MambaBlockCfg,
    pub in1: (ParamId, ParamId),
    pub in2: (ParamId, ParamId),
    conv: (ParamId, ParamId),
    ssm: SsmParams,
    out: (ParamId, ParamId),
}

impl MambaBlock {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, rng: &mut R, prefix: &str, cfg: MambaBlockCfg) -> Self {
        let (c, inner) = (cfg.channels, cfg.inner());
        let mut linear = |name: &str, out: usize, inp: usize, store: &mut ParamStore<E>| {
            (
                store.add(format!("{prefix}.{name}.w"), uniform_fan_in(rng, &[out, inp], inp)),
                store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[out])),
            )
        };
        let in1 = linear("in1", inner, c, store);
        let in2 = linear("in2", inner, c, store);
        let conv = (
            store.add(format!("{prefix}.conv1d.w"), uniform_fan_in(rng, &[inner, cfg.conv_width], cfg.conv_width)),
            store.add(format!("{prefix}.conv1d.b"), Tensor::zeros(&[inner])),
        );
        let ssm = SsmParams::new(store, rng, &format!("{prefix}.ssm"), inner, cfg.state, cfg.chunk);
        let out = (
            store.add(format!("{prefix}.out.w"), uniform_fan_in(rng, &[c, inner], inner)),
            store.add(format!("{prefix}.out.b"), Tensor::zeros(&[c])),
        );
        Self {
            cfg,
            in1,
            in2,
            conv,
            ssm,
            out,
        }
    }

    pub fn cfg(&self) -> &MambaBlockCfg {
        &self.cfg
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, x: Var) -> Result<Var> {
        match g.shape(x) {
            [_, l, c] if *l > 0 && *c == self.cfg.channels => {}
            s => {
                return Err(Error::contract(
                    "mamba_block",
                    format!("expected (B, L>0, {}), got {s:?}", self.cfg.channels),
                ))
            }
        }
        let h = g.linear(x, p[self.in1.0], Some(p[self.in1.1]))?;
        let h = g.causal_conv1d(h, p[self.conv.0], p[self.conv.1])?;
        let h = g.silu(h);
        let y = self.ssm.forward(g, p, h)?;
        let z = g.linear(x, p[self.in2.0], Some(p[self.in2.1]))?;
        let z = g.silu(z);
        let m = g.mul(y, z)?;
        g.linear(m, p[self.out.0], Some(p[self.out.1]))
    }
}

/// Flattens `(B, C, s...)` to row-major tokens `(B, L, C)` with `L = Π s`.
pub fn flatten_tokens<E: Element>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let l: usize = s[2..].iter().product();
    let r = g.reshape(x, &[s[0], s[1], l])?;
    g.permute(r, &[0, 2, 1])
}

/// Inverse of [`flatten_tokens`] for the given spatial extents.
pub fn unflatten_tokens<E: Element>(g: &mut Graph<E>, tokens: Var, spatial: &[usize]) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let t = g.permute(tokens, &[0, 2, 1])?;
    let mut shape = vec![s[0], s[2]];
    shape.extend(spatial);
    g.reshape(t, &shape)
}

/// What runs on the flattened tokens after the two residual blocks.
#[derive(Clone, Debug)]
pub enum TokenMixer {
    /// Layer norm followed by a Mamba block, optionally wrapped in a residual add.
    Mamba {
        norm: (ParamId, ParamId),
        block: MambaBlock,
        residual: bool,
    },
    /// Flatten and unflatten only; the ablation that isolates the Mamba stage.
    Identity,
}

/// Two residual blocks followed by a sequence mixer over all spatial positions.
#[derive(Clone, Debug)]
pub struct UMambaBlock {
    res1: ResidualBlock,
    res2: ResidualBlock,
    mixer: TokenMixer,
}

impl UMambaBlock {
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        prefix: &str,
        res: ResidualBlockCfg,
        mamba: MambaBlockCfg,
        residual: bool,
    ) -> Self {
        let c = res.channels_out;
        let res1 = ResidualBlock::new(store, rng, &format!("{prefix}.res0"), res.clone());
        let res2 = ResidualBlock::new(
            store,
            rng,
            &format!("{prefix}.res1"),
            ResidualBlockCfg {
                channels_in: c,
                channels_out: c,
                stride: vec![1; res.stride.len()],
            },
        );
        let norm = (
            store.add(format!("{prefix}.mamba.norm.scale"), Tensor::full(&[c], E::ONE)),
            store.add(format!("{prefix}.mamba.norm.shift"), Tensor::zeros(&[c])),
        );
        let block = MambaBlock::new(store, rng, &format!("{prefix}.mamba"), mamba);
        Self {
            res1,
            res2,
            mixer: TokenMixer::Mamba { norm, block, residual },
        }
    }

    /// The same block with its mixer replaced.
    pub fn with_mixer(mut self, mixer: TokenMixer) -> Self {
        self.mixer = mixer;
        self
    }

    pub fn residual_blocks(&self) -> (&ResidualBlock, &ResidualBlock) {
        (&self.res1, &self.res2)
    }

    pub fn mixer(&self) -> &TokenMixer {
        &self.mixer
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.res1.forward(g, p, x)?;
        let h = self.res2.forward(g, p, h)?;
        self.mix(g, p, h)
    }

    /// Applies only the token mixer to a `(B, C, spatial...)` feature map.
    pub fn mix<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, h: Var) -> Result<Var> {
        let spatial = g.shape(h)[2..].to_vec();
        let tokens = flatten_tokens(g, h)?;
        let mixed = match &self.mixer {
            TokenMixer::Identity => tokens,
            TokenMixer::Mamba { norm, block, residual } => {
                let n = g.layer_norm(tokens, p[norm.0], p[norm.1], E::from_f64(NORM_EPS))?;
                let m = block.forward(g, p, n)?;
                if *residual {
                    g.add(m, tokens)?
                } else {
                    m
                }
            }
        };
        unflatten_tokens(g, mixed, &spatial)
    }
}
