//! Supervised pre-training and teacher/student self-training.

pub mod checkpoint;
pub mod ema;
pub mod pseudo;

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use rand::Rng;

use crate::data::augment::{AugmentationPair, Geometry, Photometric, PhotometricConfig};
use crate::data::batch::{chw_to_raster, Batch};
use crate::data::{ImageCollection, Mode};
use crate::decoder::seg_loss;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelOutput, TwinsModel};
use crate::nn::optim::AdamWConfig;
use crate::nn::{AdamW, ParamStore};
use crate::refinement::iteration_weights;
use crate::uncertainty::{kl_alignment, l1_norm, laplace_nll, SoftHistogram};

pub use checkpoint::Checkpoint;
pub use ema::ema_update;
pub use pseudo::{compute_threshold, make_pseudo_labels, threshold_params, PseudoLabelSet, ThresholdParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; zero disables clipping.
    pub grad_clip: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub seg_weight: f64,
    pub corr_weight: f64,
    /// Random resize and crop (and flow flips) during supervised steps.
    pub augment: bool,
    /// Teacher view size; zero entries mean the full image.
    pub weak_crop: (usize, usize),
    /// Student view size, a sub-window of the teacher view.
    pub strong_crop: (usize, usize),
    pub scales: Vec<f32>,
    pub photometric: PhotometricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            ema_momentum: 0.999,
            batch_size: 2,
            alpha: 0.75,
            seg_weight: 1.0,
            corr_weight: 1.0,
            augment: false,
            weak_crop: (0, 0),
            strong_crop: (64, 96),
            scales: vec![1.0, 1.25],
            photometric: PhotometricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        pseudo::check_alpha(self.alpha)?;
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!(
                "train.ema_momentum = {} must lie in (0, 1)",
                self.ema_momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer settings must be positive".into()));
        }
        if self.grad_clip < 0.0 || self.seg_weight < 0.0 || self.corr_weight < 0.0 {
            return Err(Error::Config("loss weights and clipping must be non-negative".into()));
        }
        for (h, w) in [self.weak_crop, self.strong_crop] {
            if h % 32 != 0 || w % 32 != 0 {
                return Err(Error::Config(format!("crop {h}x{w} is not a multiple of 32")));
            }
        }
        if self.scales.iter().any(|&s| !(s >= 1.0)) {
            return Err(Error::Config("augmentation scales must be >= 1".into()));
        }
        Ok(())
    }
}

/// Student, EMA teacher, optimizer and counters.
pub struct TrainerState {
    pub model_config: ModelConfig,
    pub student_store: ParamStore,
    pub teacher_store: ParamStore,
    pub student: TwinsModel,
    pub teacher: TwinsModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub ema_momentum: f64,
    /// Self-training batches without a single confident pixel.
    pub skipped_batches: u64,
}

impl TrainerState {
    pub fn new(cfg: &ModelConfig, train: &TrainConfig, seed: u64, dtype: DType) -> Result<Self> {
        let student_store = ParamStore::new(dtype, seed);
        let student = TwinsModel::new(&student_store.root(), cfg)?;
        let teacher_store = student_store.deep_clone()?;
        let teacher = TwinsModel::new(&teacher_store.root(), cfg)?;
        Ok(Self {
            model_config: cfg.clone(),
            student_store,
            teacher_store,
            student,
            teacher,
            optimizer: AdamW::new(train.optimizer),
            step: 0,
            ema_momentum: train.ema_momentum,
            skipped_batches: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig, train: &TrainConfig, dtype: DType) -> Result<Self> {
        let mut state = Self::new(cfg, train, 0, dtype)?;
        state.student_store.assign_all(&ck.student)?;
        state.teacher_store.assign_all(&ck.teacher)?;
        state.optimizer = AdamW::import(train.optimizer, ck.optimizer_step, &ck.optimizer)?;
        state.step = ck.step;
        state.skipped_batches = ck.skipped_batches;
        Ok(state)
    }

    pub fn to_checkpoint(&self, metadata: BTreeMap<String, String>) -> Result<Checkpoint> {
        let (optimizer_step, optimizer) = self.optimizer.export();
        Ok(Checkpoint {
            student: self.student_store.snapshot()?,
            teacher: self.teacher_store.snapshot()?,
            optimizer,
            optimizer_step,
            step: self.step,
            skipped_batches: self.skipped_batches,
            metadata,
        })
    }

    pub fn dtype(&self) -> DType {
        self.student_store.dtype()
    }

    fn ensure_teacher_untouched(&self, grads: &GradStore) -> Result<()> {
        for (name, var) in self.teacher_store.vars() {
            if grads.get(var.as_tensor()).is_some() {
                return Err(Error::Contract(format!("teacher parameter `{name}` received a gradient")));
            }
        }
        Ok(())
    }

    fn apply(&mut self, total: &Tensor, cfg: &TrainConfig, lr: f64) -> Result<f64> {
        let grads = total.backward()?;
        self.ensure_teacher_untouched(&grads)?;
        let norm = AdamW::grad_norm(&self.student_store, &grads)?;
        if !norm.is_finite() {
            let mut bad = Vec::new();
            for (name, var) in self.student_store.vars() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    if !scalar(&g.sqr()?.sum_all()?)?.is_finite() {
                        bad.push(name);
                    }
                }
            }
            return Err(Error::NonFiniteLoss {
                step: self.step,
                terms: format!("gradient norm {norm}; non-finite gradients for {}", bad.join(", ")),
            });
        }
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.optimizer.step(&self.student_store, &grads, lr, scale)?;
        ema_update(&self.teacher_store, &self.student_store, self.ema_momentum)?;
        self.step += 1;
        Ok(norm)
    }
}

/// Named scalar losses for one step, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    /// Fraction of student pixels carrying a pseudo label (self-training only).
    pub coverage: Option<f64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Correspondence losses on the pixels flagged in `valid`.
#[derive(Debug, Clone)]
pub struct CorrLoss {
    /// `Σ_k γ^(K-k) · mean L1` over the iterations.
    pub sequence: Tensor,
    pub nll: Tensor,
    pub kl: Tensor,
    pub empty: bool,
}

pub fn masked_l1(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let n = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let keep = valid.ne(0.0)?;
    let gt = keep.broadcast_as(gt.shape())?.where_cond(gt, pred)?;
    let r = l1_norm(pred, &gt)?;
    let r = keep.where_cond(&r, &r.zeros_like()?)?;
    Ok((r.sum_all()? / n.max(1.0))?)
}

pub fn correspondence_loss(out: &ModelOutput, gt: &Tensor, valid: &Tensor, cfg: &ModelConfig) -> Result<CorrLoss> {
    let weights = iteration_weights(out.trace.fields.len(), cfg.refine.gamma);
    let mut sequence: Option<Tensor> = None;
    for (f, w) in out.trace.fields.iter().zip(weights) {
        let term = (masked_l1(f, gt, valid)? * w)?;
        sequence = Some(match sequence {
            None => term,
            Some(s) => (s + term)?,
        });
    }
    let sequence = sequence.expect("at least one iteration");
    let last = out.field();
    let nll = laplace_nll(last, gt, &out.sigma, valid)?;
    let keep = valid.ne(0.0)?;
    let safe_gt = keep.broadcast_as(gt.shape())?.where_cond(gt, last)?;
    let residual = l1_norm(&last.detach(), &safe_gt)?;
    let kl = kl_alignment(&out.sigma, &residual, valid, &SoftHistogram::from_config(&cfg.unc))?;
    Ok(CorrLoss {
        sequence,
        nll: nll.value,
        kl: kl.value,
        empty: nll.empty,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Combines the available terms, checks them for finiteness and returns the
/// total with its report.
fn assemble(
    step: u64,
    seg: Option<crate::decoder::SegLoss>,
    corr: Option<&CorrLoss>,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossReport)> {
    let mut terms = Vec::new();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            None => t,
            Some(s) => (s + t)?,
        });
        Ok(())
    };
    if let Some(s) = &seg {
        terms.push(("seg_ce".to_string(), scalar(&s.cross_entropy)?));
        terms.push(("seg_mask".to_string(), scalar(&s.mask)?));
        terms.push(("seg_class".to_string(), scalar(&s.class)?));
        terms.push(("seg".to_string(), scalar(&s.total)?));
        add((&s.total * cfg.seg_weight)?)?;
    }
    if let Some(c) = corr {
        terms.push(("l1".to_string(), scalar(&c.sequence)?));
        terms.push(("nll".to_string(), scalar(&c.nll)?));
        terms.push(("kl".to_string(), scalar(&c.kl)?));
        let corr = ((&c.sequence + &c.nll)? + (&c.kl * model.unc.lambda_kl)?)?;
        add((corr * cfg.corr_weight)?)?;
    }
    let total = total.ok_or_else(|| Error::Data("batch carries no supervision".into()))?;
    terms.push(("total".to_string(), scalar(&total)?));
    let bad: Vec<String> = terms
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if !bad.is_empty() {
        let all: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(Error::NonFiniteLoss {
            step,
            terms: format!("offending: {}; all: {}", bad.join(", "), all.join(", ")),
        });
    }
    Ok((total, LossReport { terms, coverage: None }))
}

/// One optimizer step on fully labelled data.
pub fn supervised_step(state: &mut TrainerState, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
    let gt = batch
        .correspondence
        .as_ref()
        .ok_or_else(|| Error::Data("supervised step needs dense correspondence labels".into()))?;
    let valid = batch.valid.as_ref().expect("valid accompanies correspondence");
    let out = state.student.forward(&batch.target, &batch.source)?;
    let seg = match &batch.segmentation {
        Some(s) => Some(seg_loss(&out.seg, s, state.model_config.decoder.no_object_weight)?),
        None => None,
    };
    let corr = correspondence_loss(&out, gt, valid, &state.model_config)?;
    let (total, mut report) = assemble(state.step, seg, Some(&corr), &state.model_config, cfg)?;
    let norm = state.apply(&total, cfg, lr)?;
    report.terms.push(("grad_norm".to_string(), norm));
    Ok(report)
}

/// Random weak/strong views of one collection; the strong crop is a
/// sub-window of the weak crop.
pub fn sample_pair<R: Rng>(rng: &mut R, c: &ImageCollection, cfg: &TrainConfig) -> Result<AugmentationPair> {
    let size = (c.height(), c.width());
    let weak_size = if cfg.weak_crop.0 == 0 { size } else { cfg.weak_crop };
    let flips = c.mode == Mode::Flow;
    let weak = Geometry::sample(rng, size, weak_size, &cfg.scales, flips)?;
    let (sh, sw) = cfg.strong_crop;
    if sh > weak_size.0 || sw > weak_size.1 {
        return Err(Error::Config(format!(
            "strong crop {sh}x{sw} does not fit in the weak view {}x{}",
            weak_size.0, weak_size.1
        )));
    }
    let (wy, wx, wh, ww) = weak.crop;
    let strong = Geometry {
        crop: (
            wy + rng.random_range(0..=wh - sh),
            wx + rng.random_range(0..=ww - sw),
            sh,
            sw,
        ),
        flip: flips && rng.random_bool(0.5),
        ..weak.clone()
    };
    let photometric = Photometric::sample(rng, &cfg.photometric, (sh, sw));
    AugmentationPair::new(weak, strong, photometric, c.mode)
}

/// Teacher predictions on a batch: the final field and σ for each image.
pub fn teacher_predict(model: &TwinsModel, batch: &Batch) -> Result<Vec<(crate::data::Raster<f32>, crate::data::Raster<f32>)>> {
    let out = model.forward(&batch.target, &batch.source)?;
    let field = out.field().detach();
    let sigma = out.sigma.detach();
    (0..batch.size())
        .map(|i| Ok((chw_to_raster(&field.get(i)?)?, chw_to_raster(&sigma.get(i)?)?)))
        .collect()
}

/// One self-training step on images without correspondence labels.
pub fn semi_supervised_step<R: Rng>(
    state: &mut TrainerState,
    items: &[&ImageCollection],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<LossReport> {
    let pairs = items
        .iter()
        .map(|c| sample_pair(rng, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled: Vec<ImageCollection> = items.iter().map(|c| c.without_correspondence()).collect();
    let weak: Vec<ImageCollection> = pairs
        .iter()
        .zip(&unlabeled)
        .map(|(p, c)| p.weak_view(c))
        .collect::<Result<_>>()?;
    let dtype = state.dtype();
    let dev = Device::Cpu;
    let weak_refs: Vec<&ImageCollection> = weak.iter().collect();
    let teacher_out = teacher_predict(&state.teacher, &Batch::from_collections(&weak_refs, dtype, &dev)?)?;
    let mut strong = Vec::with_capacity(items.len());
    let mut kept = 0.0;
    let mut total_px = 0.0;
    for ((pair, c), (field, sigma)) in pairs.iter().zip(&unlabeled).zip(teacher_out) {
        let labels = make_pseudo_labels(&field, &sigma, cfg.alpha)?;
        let (f, v) = pair.transfer(&labels.correspondence, &labels.validity)?;
        kept += v.data.iter().filter(|&&x| x != 0.0).count() as f64;
        total_px += v.data.len() as f64;
        let mut s = pair.strong_view(c)?;
        s.correspondence = Some(f);
        s.valid = Some(v);
        strong.push(s);
    }
    let strong_refs: Vec<&ImageCollection> = strong.iter().collect();
    let batch = Batch::from_collections(&strong_refs, dtype, &dev)?;
    let out = state.student.forward(&batch.target, &batch.source)?;
    let seg = match &batch.segmentation {
        Some(s) => Some(seg_loss(&out.seg, s, state.model_config.decoder.no_object_weight)?),
        None => None,
    };
    let corr = if kept > 0.0 {
        Some(correspondence_loss(
            &out,
            batch.correspondence.as_ref().unwrap(),
            batch.valid.as_ref().unwrap(),
            &state.model_config,
        )?)
    } else {
        state.skipped_batches += 1;
        None
    };
    let (total, mut report) = if seg.is_none() && corr.is_none() {
        // Nothing to learn from: count the batch and leave the weights alone.
        state.step += 1;
        return Ok(LossReport {
            terms: vec![("total".to_string(), 0.0)],
            coverage: Some(0.0),
        });
    } else {
        assemble(state.step, seg, corr.as_ref(), &state.model_config, cfg)?
    };
    if corr.is_none() {
        for k in ["l1", "nll", "kl"] {
            report.terms.push((k.to_string(), 0.0));
        }
    }
    let norm = state.apply(&total, cfg, lr)?;
    report.terms.push(("grad_norm".to_string(), norm));
    report.coverage = Some(kept / total_px);
    Ok(report)
}
