//! Multi-level convolutional GRU refinement of a dense correspondence field.
//!
//! Three GRU levels run at 1/4, 1/8 and 1/16 resolution. Every iteration
//! re-injects the aligned late taps into the gate inputs, feeds the finest level
//! with motion features from the correlation lookup, exchanges states between
//! neighbouring levels, regresses a field update from the finest state and
//! upsamples the accumulated field to full resolution with a learned convex
//! combination of 3x3 coarse neighbours.

use candle_core::{DType, Tensor};

use crate::backbone::AlignedFeatures;
use crate::correlation::CorrelationPyramid;
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Scope};

/// Working resolution relative to the input image.
pub const WORKING_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    /// Taps come from the scene-parsing encoder.
    Shared,
    /// A separate encoder feeds the refinement stream (ablation baseline).
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub iters: usize,
    pub hidden_width: usize,
    pub gamma: f64,
    pub context: ContextSource,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iters: 8,
            hidden_width: 96,
            gamma: 0.9,
            context: ContextSource::Shared,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HiddenStateSet {
    /// `(B, D, H/4, W/4)`, `(B, D, H/8, W/8)`, `(B, D, H/16, W/16)`.
    pub levels: Vec<Tensor>,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// `K` full-resolution fields `(B, 2, H, W)` in pixels.
    pub fields: Vec<Tensor>,
    pub final_hidden: HiddenStateSet,
}

impl IterationTrace {
    pub fn last(&self) -> &Tensor {
        self.fields.last().expect("trace is never empty")
    }
}

pub fn init_hidden(aligned_early: &[Tensor]) -> Result<HiddenStateSet> {
    if aligned_early.len() != 3 {
        return Err(Error::Contract(format!(
            "expected 3 aligned early taps, got {}",
            aligned_early.len()
        )));
    }
    for w in aligned_early.windows(2) {
        let (_, _, h0, w0) = w[0].dims4()?;
        let (_, _, h1, w1) = w[1].dims4()?;
        if h0 != 2 * h1 || w0 != 2 * w1 {
            return Err(Error::Contract(format!(
                "early taps at {h0}x{w0} and {h1}x{w1} are not a factor-2 pyramid"
            )));
        }
    }
    let levels = aligned_early
        .iter()
        .map(|t| Ok(t.tanh()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenStateSet {
        levels,
        iteration: 0,
    })
}

fn check_finite(t: &Tensor, iteration: usize, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            what: what.to_string(),
        })
    }
}

/// Convolutional GRU with 3x3 gates.
#[derive(Debug, Clone)]
struct ConvGru {
    /// Update and reset gates, stacked along the output channels.
    zr: Conv2d,
    q: Conv2d,
    hidden: usize,
}

impl ConvGru {
    fn new(s: &Scope, hidden: usize, input: usize) -> Result<Self> {
        Ok(Self {
            zr: Conv2d::new(&s.pp("zr"), hidden + input, 2 * hidden, 3, 1)?,
            q: Conv2d::new(&s.pp("q"), hidden + input, hidden, 3, 1)?,
            hidden,
        })
    }

    fn forward(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let hx = Tensor::cat(&[h, x], 1)?;
        let zr = ops::sigmoid(&self.zr.forward(&hx)?)?;
        let z = zr.narrow(1, 0, self.hidden)?;
        let r = zr.narrow(1, self.hidden, self.hidden)?;
        let rhx = Tensor::cat(&[&(r * h)?, x], 1)?;
        let q = self.q.forward(&rhx)?.tanh()?;
        let keep = (z.neg()? + 1.0)?;
        Ok(((keep * h)? + (z * q)?)?)
    }
}

/// Encodes correlation samples together with the current field.
#[derive(Debug, Clone)]
struct MotionEncoder {
    field: Conv2d,
    mix: Conv2d,
    out: Conv2d,
}

impl MotionEncoder {
    fn new(s: &Scope, corr_channels: usize, width: usize) -> Result<Self> {
        let field_width = (width / 4).max(8);
        Ok(Self {
            field: Conv2d::new(&s.pp("field"), 2, field_width, 3, 1)?,
            mix: Conv2d::new(&s.pp("mix"), corr_channels + field_width, width, 1, 1)?,
            out: Conv2d::new(&s.pp("out"), width, width - 2, 3, 1)?,
        })
    }

    fn forward(&self, corr: &Tensor, field: &Tensor) -> Result<Tensor> {
        let f = self.field.forward(field)?.relu()?;
        let m = self.mix.forward(&Tensor::cat(&[corr, &f], 1)?)?.relu()?;
        let m = self.out.forward(&m)?.relu()?;
        Ok(Tensor::cat(&[&m, field], 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct UpdateBlock {
    grus: [ConvGru; 3],
    motion: MotionEncoder,
    delta1: Conv2d,
    delta2: Conv2d,
    mask1: Conv2d,
    mask2: Conv2d,
    mode: Mode,
    hidden: usize,
}

impl UpdateBlock {
    pub fn new(s: &Scope, hidden: usize, corr_channels: usize, mode: Mode) -> Result<Self> {
        if hidden < 8 {
            return Err(Error::Config(format!("hidden width {hidden} is too small (min 8)")));
        }
        let motion_width = hidden;
        Ok(Self {
            grus: [
                ConvGru::new(&s.pp("gru1"), hidden, 2 * hidden + motion_width)?,
                ConvGru::new(&s.pp("gru2"), hidden, 3 * hidden)?,
                ConvGru::new(&s.pp("gru3"), hidden, 2 * hidden)?,
            ],
            motion: MotionEncoder::new(&s.pp("motion"), corr_channels, motion_width)?,
            delta1: Conv2d::new(&s.pp("delta1"), hidden, hidden, 3, 1)?,
            delta2: Conv2d::new(&s.pp("delta2"), hidden, 2, 3, 1)?,
            mask1: Conv2d::new(&s.pp("mask1"), hidden, hidden, 3, 1)?,
            mask2: Conv2d::new(&s.pp("mask2"), hidden, 9 * WORKING_STRIDE * WORKING_STRIDE, 1, 1)?,
            mode,
            hidden,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    /// One refinement iteration. Returns the new states and a field update at
    /// the working resolution; in stereo mode the update's second channel is zero.
    pub fn gru_step(
        &self,
        h: &HiddenStateSet,
        aligned_late: &[Tensor],
        corr_feat: &Tensor,
        current: &Tensor,
    ) -> Result<(HiddenStateSet, Tensor)> {
        if h.levels.len() != 3 || aligned_late.len() != 3 {
            return Err(Error::Contract("gru_step expects three levels".into()));
        }
        let k = h.iteration;
        for (i, t) in h.levels.iter().enumerate() {
            check_finite(t, k, &format!("hidden state level {}", i + 1))?;
        }
        for (i, t) in aligned_late.iter().enumerate() {
            check_finite(t, k, &format!("context level {}", i + 1))?;
        }
        check_finite(corr_feat, k, "correlation features")?;
        check_finite(current, k, "current field")?;

        let (h1, h2, h3) = (&h.levels[0], &h.levels[1], &h.levels[2]);
        let size = |t: &Tensor| -> Result<(usize, usize)> {
            let (_, _, a, b) = t.dims4()?;
            Ok((a, b))
        };
        let (s1, s2) = (size(h1)?, size(h2)?);

        let x3 = Tensor::cat(&[&aligned_late[2], &ops::avg_pool2x(h2)?], 1)?;
        let n3 = self.grus[2].forward(h3, &x3)?;

        let up3 = ops::resize_bilinear(&n3, s2.0, s2.1)?;
        let x2 = Tensor::cat(&[&aligned_late[1], &ops::avg_pool2x(h1)?, &up3], 1)?;
        let n2 = self.grus[1].forward(h2, &x2)?;

        let motion = self.motion.forward(corr_feat, current)?;
        let up2 = ops::resize_bilinear(&n2, s1.0, s1.1)?;
        let x1 = Tensor::cat(&[&aligned_late[0], &motion, &up2], 1)?;
        let n1 = self.grus[0].forward(h1, &x1)?;

        let delta = self.delta2.forward(&self.delta1.forward(&n1)?.relu()?)?;
        let delta = self.constrain(&delta)?;
        Ok((
            HiddenStateSet {
                levels: vec![n1, n2, n3],
                iteration: k + 1,
            },
            delta,
        ))
    }

    /// Zeroes the vertical component in stereo mode.
    fn constrain(&self, field: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Flow => Ok(field.clone()),
            Mode::Stereo => {
                let keep = Tensor::new(&[1f32, 0.0], field.device())?
                    .to_dtype(field.dtype())?
                    .reshape((1, 2, 1, 1))?;
                Ok(field.broadcast_mul(&keep)?)
            }
        }
    }

    /// Convex-combination logits `(B, 9 * 16, h, w)` from the finest state.
    pub fn upsample_logits(&self, h1: &Tensor) -> Result<Tensor> {
        let m = self.mask2.forward(&self.mask1.forward(h1)?.relu()?)?;
        Ok((m * 0.25)?)
    }
}

/// Softmax over the 9 neighbours: `(B, 1, 9, f*f, h, w)`.
pub fn convex_weights(logits: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    let m = logits.reshape((b, 1, 9, factor * factor, h, w))?;
    ops::softmax(&m, 2)
}

/// Upsamples a working-resolution field by `factor`, scaling its values by the
/// same factor, as a convex combination of each pixel's 3x3 neighbourhood.
pub fn convex_upsample(field: &Tensor, logits: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = field.dims4()?;
    let weights = convex_weights(logits, factor)?;
    let scaled = (field * factor as f64)?;
    let padded = scaled.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut neighbours = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            neighbours.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    let stacked = Tensor::stack(&neighbours, 2)?.reshape((b, c, 9, 1, h, w))?;
    let up = weights.broadcast_mul(&stacked)?.sum(2)?;
    let up = up.reshape((b, c, factor, factor, h, w))?.permute((0, 1, 4, 2, 5, 3))?;
    Ok(up.reshape((b, c, h * factor, w * factor))?)
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub update: UpdateBlock,
    pub radius: usize,
    pub mode: Mode,
}

impl Refiner {
    pub fn new(s: &Scope, hidden: usize, corr_channels: usize, radius: usize, mode: Mode) -> Result<Self> {
        Ok(Self {
            update: UpdateBlock::new(s, hidden, corr_channels, mode)?,
            radius,
            mode,
        })
    }

    /// Runs `iters` refinement steps starting from `init` (working resolution,
    /// zero when `None`).
    pub fn refine(
        &self,
        pyr: &CorrelationPyramid,
        aligned: &AlignedFeatures,
        iters: usize,
        init: Option<&Tensor>,
    ) -> Result<IterationTrace> {
        if iters < 1 {
            return Err(Error::Config("refinement needs at least one iteration".into()));
        }
        let (b, h, w) = pyr.base;
        let dtype = pyr.levels[0].dtype();
        let dev = pyr.levels[0].device();
        let mut current = match init {
            Some(t) => t.clone(),
            None => Tensor::zeros((b, 2, h, w), dtype, dev)?,
        };
        let mut hidden = init_hidden(&aligned.early)?;
        let mut fields = Vec::with_capacity(iters);
        for _ in 0..iters {
            current = current.detach();
            let corr = pyr.lookup(&current, self.radius)?;
            let (next, delta) = self.update.gru_step(&hidden, &aligned.late, &corr, &current)?;
            hidden = next;
            current = (current + delta)?;
            let logits = self.update.upsample_logits(&hidden.levels[0])?;
            fields.push(convex_upsample(&current, &logits, WORKING_STRIDE)?);
        }
        Ok(IterationTrace {
            fields,
            final_hidden: hidden,
        })
    }
}

/// Per-iteration loss weights `gamma^(K-k)` for `k = 1..K`.
pub fn iteration_weights(iters: usize, gamma: f64) -> Vec<f64> {
    (1..=iters).map(|k| gamma.powi((iters - k) as i32)).collect()
}
