//! Four-stage convolutional encoder with early/late taps and channel alignment.
//!
//! Stage `i` (1-based) runs at stride `2^(i+1)`: a patchify stem of stride 4 for
//! stage 1 and stride-2 downsampling for the others, each followed by two
//! residual blocks. The first block's output is the early tap, the second's is
//! the late tap (and the stage output). Normalisation inside the encoder is
//! per pixel, so every feature depends only on its receptive field.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ops, ChannelNorm, Conv2d, GroupNorm, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [48, 96, 192, 384],
            groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "backbone channels {:?} must be positive and non-decreasing",
                self.channels
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("backbone.groups must be positive".into()));
        }
        Ok(())
    }
}

/// Stage outputs `F_1..F_4`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

/// Outputs of the first and last block of stages 1-3.
#[derive(Debug, Clone)]
pub struct EarlyLateTaps {
    pub early: Vec<Tensor>,
    pub late: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AlignedFeatures {
    pub early: Vec<Tensor>,
    pub late: Vec<Tensor>,
}

/// Stride of stage `i` (1-based).
pub fn stage_stride(stage: usize) -> usize {
    1 << (stage + 1)
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm: ChannelNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), c, c, 3, 1)?,
            norm: ChannelNorm::new(&s.pp("norm"), c)?,
            conv2: Conv2d::new(&s.pp("conv2"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?;
        let y = ops::gelu(&self.norm.forward(&y)?)?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    down_norm: ChannelNorm,
    blocks: [ResBlock; 2],
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
    pub config: BackboneConfig,
}

/// Input window seen by a feature: output index `i` covers input pixels
/// `start + i * jump .. start + i * jump + size` (clipped to the image).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub start: i64,
    pub size: i64,
    pub jump: i64,
}

impl ReceptiveField {
    fn through(self, kernel: i64, stride: i64, padding: i64) -> Self {
        Self {
            start: self.start - padding * self.jump,
            size: self.size + (kernel - 1) * self.jump,
            jump: self.jump * stride,
        }
    }

    pub fn covers(&self, out_index: usize, input_index: usize) -> bool {
        let lo = self.start + out_index as i64 * self.jump;
        let p = input_index as i64;
        p >= lo && p < lo + self.size
    }
}

impl Backbone {
    pub fn new(s: &Scope, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let s = s.pp(format!("stage{}", i + 1));
            let k = if i == 0 { 4 } else { 2 };
            stages.push(Stage {
                down: Conv2d::with_padding(&s.pp("down"), c_in, c, k, k, 0, true)?,
                down_norm: ChannelNorm::new(&s.pp("down_norm"), c)?,
                blocks: [
                    ResBlock::new(&s.pp("block1"), c)?,
                    ResBlock::new(&s.pp("block2"), c)?,
                ],
            });
            c_in = c;
        }
        Ok(Self {
            stages,
            config: config.clone(),
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<(FeaturePyramid, EarlyLateTaps)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Contract(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 32"
            )));
        }
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(4);
        let mut early = Vec::with_capacity(3);
        let mut late = Vec::with_capacity(3);
        for (i, st) in self.stages.iter().enumerate() {
            x = st.down_norm.forward(&st.down.forward(&x)?)?;
            let e = st.blocks[0].forward(&x)?;
            let l = st.blocks[1].forward(&e)?;
            if i < 3 {
                early.push(e);
                late.push(l.clone());
            }
            stages.push(l.clone());
            x = l;
        }
        Ok((FeaturePyramid { stages }, EarlyLateTaps { early, late }))
    }

    /// Stage 1 only: `(early tap, stage output)`.
    pub fn encode_first_stage(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Contract(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 32"
            )));
        }
        let st = &self.stages[0];
        let x = st.down_norm.forward(&st.down.forward(image)?)?;
        let e = st.blocks[0].forward(&x)?;
        let l = st.blocks[1].forward(&e)?;
        Ok((e, l))
    }

    /// Receptive field of each stage output along one axis.
    pub fn receptive_fields(&self) -> [ReceptiveField; 4] {
        let mut rf = ReceptiveField {
            start: 0,
            size: 1,
            jump: 1,
        };
        let mut out = [rf; 4];
        for (i, slot) in out.iter_mut().enumerate() {
            let k = if i == 0 { 4 } else { 2 };
            rf = rf.through(k, k, 0);
            for _ in 0..4 {
                rf = rf.through(3, 1, 1);
            }
            *slot = rf;
        }
        out
    }

    pub fn channels(&self) -> [usize; 4] {
        self.config.channels
    }
}

/// `ReLU(GroupNorm(Conv1x1(x)))` channel alignment.
#[derive(Debug, Clone)]
pub struct Align {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Align {
    pub fn new(s: &Scope, c_in: usize, target_channels: usize, groups: usize) -> Result<Self> {
        if target_channels == 0 {
            return Err(Error::Config("alignment width must be positive".into()));
        }
        Ok(Self {
            conv: Conv2d::no_bias(&s.pp("conv"), c_in, target_channels, 1)?,
            norm: GroupNorm::new(&s.pp("norm"), target_channels, groups)?,
        })
    }

    /// Group-normalised activations before the affine transform and rectifier.
    pub fn normalized(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.normalize(&self.conv.forward(x)?)
    }

    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(x)?.relu()?)
    }
}

/// Independent aligners for the early and late taps of stages 1-3.
#[derive(Debug, Clone)]
pub struct TapAligner {
    early: Vec<Align>,
    late: Vec<Align>,
}

impl TapAligner {
    pub fn new(s: &Scope, channels: [usize; 4], hidden: usize, groups: usize) -> Result<Self> {
        let mut early = Vec::with_capacity(3);
        let mut late = Vec::with_capacity(3);
        for (i, &c) in channels.iter().take(3).enumerate() {
            early.push(Align::new(&s.pp(format!("early{}", i + 1)), c, hidden, groups)?);
            late.push(Align::new(&s.pp(format!("late{}", i + 1)), c, hidden, groups)?);
        }
        Ok(Self { early, late })
    }

    pub fn align(&self, taps: &EarlyLateTaps) -> Result<AlignedFeatures> {
        if taps.early.len() != 3 || taps.late.len() != 3 {
            return Err(Error::Contract("expected taps for three stages".into()));
        }
        let early = self
            .early
            .iter()
            .zip(&taps.early)
            .map(|(a, t)| a.forward(t))
            .collect::<Result<Vec<_>>>()?;
        let late = self
            .late
            .iter()
            .zip(&taps.late)
            .map(|(a, t)| a.forward(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(AlignedFeatures { early, late })
    }
}
