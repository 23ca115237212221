//! Network configuration: stages, per-axis pooling and channel widths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::MambaBlockCfg;
use crate::ssm::{DEFAULT_CHUNK, DEFAULT_STATE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// U-Mamba block only at the deepest encoder stage.
    Bot,
    /// U-Mamba block at every encoder stage.
    Enc,
    /// Residual blocks only.
    #[serde(alias = "cnn")]
    CnnBaseline,
}

impl Variant {
    pub fn has_mamba_at(self, stage: usize, n_stages: usize) -> bool {
        match self {
            Variant::Bot => stage + 1 == n_stages,
            Variant::Enc => true,
            Variant::CnnBaseline => false,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bot" => Ok(Variant::Bot),
            "enc" => Ok(Variant::Enc),
            "cnn" | "cnn_baseline" => Ok(Variant::CnnBaseline),
            other => Err(Error::Plan(format!("unknown variant {other:?}; expected bot, enc or cnn"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bot => "bot",
            Variant::Enc => "enc",
            Variant::CnnBaseline => "cnn_baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaSettings {
    pub state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub chunk: usize,
    /// Residual add around the Mamba stage of each U-Mamba block.
    pub residual: bool,
}

impl Default for MambaSettings {
    fn default() -> Self {
        Self {
            state: DEFAULT_STATE_SIZE,
            conv_width: 4,
            expand: 2,
            chunk: DEFAULT_CHUNK,
            residual: true,
        }
    }
}

impl MambaSettings {
    pub fn block_cfg(&self, channels: usize) -> MambaBlockCfg {
        MambaBlockCfg {
            channels,
            expand: self.expand,
            state: self.state,
            conv_width: self.conv_width,
            chunk: self.chunk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub dims: usize,
    pub patch: Vec<usize>,
    pub batch: usize,
    pub n_stages: usize,
    pub pooling: Vec<usize>,
    pub base_channels: usize,
    pub max_channels: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub variant: Variant,
    #[serde(default)]
    pub mamba: MambaSettings,
}

pub fn default_max_channels(dims: usize) -> usize {
    if dims == 3 {
        320
    } else {
        512
    }
}

impl NetworkPlan {
    /// A plan with default widths whose stage count follows from `pooling`.
    pub fn new(patch: Vec<usize>, pooling: Vec<usize>, n_classes: usize, variant: Variant) -> Self {
        let dims = patch.len();
        Self {
            dims,
            n_stages: pooling.iter().copied().max().unwrap_or(0) + 1,
            patch,
            batch: 2,
            pooling,
            base_channels: 32,
            max_channels: default_max_channels(dims),
            in_channels: 1,
            n_classes,
            variant,
            mamba: MambaSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Plan(m));
        if !(1..=3).contains(&self.dims) {
            return fail(format!("dimensionality {} not in 1..=3", self.dims));
        }
        if self.patch.len() != self.dims || self.pooling.len() != self.dims {
            return fail(format!(
                "patch {:?} and pooling {:?} must both have {} axes",
                self.patch, self.pooling, self.dims
            ));
        }
        let max_pool = self.pooling.iter().copied().max().unwrap_or(0);
        if self.n_stages != max_pool + 1 {
            return fail(format!("n_stages {} != max pooling {} + 1", self.n_stages, max_pool));
        }
        for (axis, (&p, &k)) in self.patch.iter().zip(&self.pooling).enumerate() {
            if p == 0 || p % (1usize << k) != 0 {
                return fail(format!("patch extent {p} on axis {axis} not divisible by 2^{k}"));
            }
        }
        if self.batch == 0 || self.base_channels == 0 || self.in_channels == 0 || self.max_channels < self.base_channels {
            return fail("batch, base_channels and in_channels must be positive and max_channels >= base".into());
        }
        if self.n_classes < 2 || self.n_classes > u8::MAX as usize {
            return fail(format!("n_classes {} not in 2..=255", self.n_classes));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(20)).min(self.max_channels)
    }

    /// Downsampling factor entering `stage`, per axis.
    pub fn stride(&self, stage: usize) -> Vec<usize> {
        self.pooling
            .iter()
            .map(|&k| if stage > 0 && k >= stage { 2 } else { 1 })
            .collect()
    }

    /// Spatial extents of the encoder output at every stage.
    pub fn stage_shapes(&self) -> Vec<Vec<usize>> {
        let mut cur = self.patch.clone();
        (0..self.n_stages)
            .map(|s| {
                for (c, st) in cur.iter_mut().zip(self.stride(s)) {
                    *c /= st;
                }
                cur.clone()
            })
            .collect()
    }

    pub fn bottleneck(&self) -> Vec<usize> {
        self.stage_shapes().pop().expect("at least one stage")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }
}
