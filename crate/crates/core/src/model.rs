//! The full two-stream network: shared encoder, correlation pyramid, GRU
//! refinement, cross-task adapter, mask decoder and uncertainty head.

use candle_core::Tensor;

use crate::backbone::{Backbone, BackboneConfig, TapAligner};
use crate::correlation::{self, CorrConfig, CorrFeatureSource};
use crate::cta::{CrossTaskAdapter, CtaConfig};
use crate::data::Mode;
use crate::decoder::{Decoder, DecoderConfig, SegmentationOutput};
use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::refinement::{ContextSource, IterationTrace, RefineConfig, Refiner};
use crate::uncertainty::{UncertaintyConfig, UncertaintyHead};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub corr: CorrConfig,
    pub refine: RefineConfig,
    pub cta: CtaConfig,
    pub decoder: DecoderConfig,
    pub unc: UncertaintyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Stereo,
            backbone: BackboneConfig::default(),
            corr: CorrConfig::default(),
            refine: RefineConfig::default(),
            cta: CtaConfig::default(),
            decoder: DecoderConfig::default(),
            unc: UncertaintyConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A small network that trains in minutes on one CPU core.
    pub fn compact() -> Self {
        Self {
            backbone: BackboneConfig {
                channels: [16, 32, 48, 64],
                groups: 4,
            },
            refine: RefineConfig {
                hidden_width: 32,
                ..RefineConfig::default()
            },
            decoder: DecoderConfig {
                dim: 32,
                ..DecoderConfig::default()
            },
            unc: UncertaintyConfig {
                hidden: 16,
                ..UncertaintyConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.refine.iters < 2 {
            return Err(Error::Config(format!(
                "refine.iters = {} but the uncertainty head needs at least 2",
                self.refine.iters
            )));
        }
        if !(self.refine.gamma > 0.0 && self.refine.gamma <= 1.0) {
            return Err(Error::Config(format!("refine.gamma = {} is outside (0, 1]", self.refine.gamma)));
        }
        if self.refine.hidden_width % self.backbone.groups != 0 {
            return Err(Error::Config(format!(
                "refine.hidden_width = {} is not divisible by {} groups",
                self.refine.hidden_width, self.backbone.groups
            )));
        }
        if self.corr.levels == 0 {
            return Err(Error::Config("corr.levels must be positive".into()));
        }
        if self.unc.bins < 2 || self.unc.logsig_clamp <= 0.0 || self.unc.bandwidth <= 0.0 {
            return Err(Error::Config("uncertainty histogram settings are invalid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub trace: IterationTrace,
    /// `(B, 1, H, W)`.
    pub sigma: Tensor,
    pub seg: SegmentationOutput,
}

impl ModelOutput {
    pub fn field(&self) -> &Tensor {
        self.trace.last()
    }
}

#[derive(Debug, Clone)]
pub struct TwinsModel {
    pub backbone: Backbone,
    /// Separate encoder for the refinement context (ablation only).
    pub context_backbone: Option<Backbone>,
    pub aligner: TapAligner,
    pub refiner: Refiner,
    pub cta: CrossTaskAdapter,
    pub decoder: Decoder,
    pub uncertainty: UncertaintyHead,
    pub config: ModelConfig,
}

impl TwinsModel {
    pub fn new(s: &Scope, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.backbone.channels;
        let d = cfg.refine.hidden_width;
        let backbone = Backbone::new(&s.pp("backbone"), &cfg.backbone)?;
        let context_backbone = match cfg.refine.context {
            ContextSource::Shared => None,
            ContextSource::Independent => Some(Backbone::new(&s.pp("context_backbone"), &cfg.backbone)?),
        };
        Ok(Self {
            backbone,
            context_backbone,
            aligner: TapAligner::new(&s.pp("align"), ch, d, cfg.backbone.groups)?,
            refiner: Refiner::new(&s.pp("refine"), d, cfg.corr.channels(cfg.mode), cfg.corr.radius, cfg.mode)?,
            cta: CrossTaskAdapter::new(&s.pp("cta"), d, &ch[..3], &cfg.cta)?,
            decoder: Decoder::new(&s.pp("decoder"), ch, &cfg.decoder)?,
            uncertainty: UncertaintyHead::new(&s.pp("uncertainty"), cfg.refine.iters, &cfg.unc)?,
            config: cfg.clone(),
        })
    }

    /// `target` and `source` are `(B, 3, H, W)` images in `[0, 1]`.
    pub fn forward(&self, target: &Tensor, source: &Tensor) -> Result<ModelOutput> {
        let (_, _, h, w) = target.dims4()?;
        if target.dims() != source.dims() {
            return Err(Error::Contract(format!(
                "target {:?} and source {:?} differ in shape",
                target.dims(),
                source.dims()
            )));
        }
        let t = ((target * 2.0)? - 1.0)?;
        let s = ((source * 2.0)? - 1.0)?;
        let (pyramid, taps) = self.backbone.encode(&t)?;
        let (s_early, s_stage) = self.backbone.encode_first_stage(&s)?;
        let (ft, fs) = match self.config.corr.features {
            CorrFeatureSource::Stage => (&pyramid.stages[0], s_stage),
            CorrFeatureSource::Early => (&taps.early[0], s_early),
        };
        // Keep dot products of unit-variance features O(sqrt C).
        let scale = (ft.dim(1)? as f64).powf(-0.25);
        let corr = correlation::build(&(ft * scale)?, &(fs * scale)?, self.config.mode, self.config.corr.levels)?;
        let aligned = match &self.context_backbone {
            None => self.aligner.align(&taps)?,
            Some(ctx) => self.aligner.align(&ctx.encode(&t)?.1)?,
        };
        let trace = self.refiner.refine(&corr, &aligned, self.config.refine.iters, None)?;
        let fused = self.cta.fuse(&pyramid.stages, &trace.final_hidden.levels)?;
        let seg = self.decoder.decode(&fused, (h, w))?;
        let detached: Vec<Tensor> = trace.fields.iter().map(|f| f.detach()).collect();
        let sigma = self.uncertainty.estimate(&detached)?;
        Ok(ModelOutput { trace, sigma, seg })
    }
}
