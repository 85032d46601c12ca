//! Query-based mask decoder for semantic segmentation.
//!
//! A top-down FPN turns the four (fused) stages into a pixel embedding at 1/4
//! resolution. Learned queries attend to the 1/16, 1/8 and 1/4 levels in turn,
//! then predict a class distribution (with a no-object slot) and a mask
//! embedding. Semantic logits are the probability-weighted sum of the masks.

use candle_core::{DType, Device, Tensor};

use crate::cta::to_tokens;
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Init, LayerNorm, Linear, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub num_classes: usize,
    /// Zero selects `2 * num_classes`.
    pub num_queries: usize,
    pub dim: usize,
    /// Weight of the no-object class in the query classification loss.
    pub no_object_weight: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_queries: 0,
            dim: 128,
            no_object_weight: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn queries(&self) -> usize {
        if self.num_queries == 0 {
            2 * self.num_classes
        } else {
            self.num_queries
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("decoder needs at least 2 classes".into()));
        }
        if self.queries() < self.num_classes {
            return Err(Error::Config(format!(
                "{} queries cannot cover {} classes",
                self.queries(),
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("decoder.dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// `(B, C, H, W)`.
    pub per_pixel_logits: Tensor,
    /// `(B, Nq, H, W)`, before the sigmoid.
    pub mask_logits: Tensor,
    /// `(B, Nq, C + 1)`; the last slot is "no object".
    pub class_logits: Tensor,
}

impl SegmentationOutput {
    pub fn per_query_masks(&self) -> Result<Tensor> {
        ops::sigmoid(&self.mask_logits)
    }

    /// `(B, H, W)` class map.
    pub fn predict(&self) -> Result<Tensor> {
        Ok(self.per_pixel_logits.argmax(1)?)
    }
}

/// `Σ_q softmax(class)_{q,c} · mask_q` over the real classes.
pub fn aggregate(class_logits: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (b, nq, h, w) = masks.dims4()?;
    let c = class_logits.dim(2)? - 1;
    let probs = ops::softmax(class_logits, 2)?.narrow(2, 0, c)?;
    let out = probs
        .transpose(1, 2)?
        .contiguous()?
        .matmul(&masks.reshape((b, nq, h * w))?)?;
    Ok(out.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
struct QueryRound {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
}

impl QueryRound {
    fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&s.pp("q"), dim, dim)?,
            k: Linear::new(&s.pp("k"), dim, dim)?,
            v: Linear::new(&s.pp("v"), dim, dim)?,
            o: Linear::new(&s.pp("o"), dim, dim)?,
            ln1: LayerNorm::new(&s.pp("ln1"), dim)?,
            ffn1: Linear::new(&s.pp("ffn1"), dim, 2 * dim)?,
            ffn2: Linear::new(&s.pp("ffn2"), 2 * dim, dim)?,
            ln2: LayerNorm::new(&s.pp("ln2"), dim)?,
        })
    }

    /// `queries (B, Nq, d)`, `memory (B, N, d)`.
    fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let d = queries.dim(2)?;
        let q = self.q.forward(queries)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = ops::softmax(&scores, 2)?.matmul(&v)?;
        let x = self.ln1.forward(&(queries + self.o.forward(&attn)?)?)?;
        let f = self.ffn2.forward(&ops::gelu(&self.ffn1.forward(&x)?)?)?;
        self.ln2.forward(&(x + f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    lateral: Vec<Conv2d>,
    smooth: Conv2d,
    queries: Tensor,
    rounds: Vec<QueryRound>,
    class_head: Linear,
    mask1: Linear,
    mask2: Linear,
    pub config: DecoderConfig,
}

impl Decoder {
    /// `channels` are the four stage widths.
    pub fn new(s: &Scope, channels: [usize; 4], cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let lateral = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&s.pp(format!("lateral{i}")), c, d, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lateral,
            smooth: Conv2d::new(&s.pp("smooth"), d, d, 3, 1)?,
            queries: s.get("queries", (cfg.queries(), d), Init::Normal { std: 1.0 })?,
            rounds: (0..3)
                .map(|i| QueryRound::new(&s.pp(format!("round{i}")), d))
                .collect::<Result<Vec<_>>>()?,
            class_head: Linear::new(&s.pp("class"), d, cfg.num_classes + 1)?,
            mask1: Linear::new(&s.pp("mask1"), d, d)?,
            mask2: Linear::new(&s.pp("mask2"), d, d)?,
            config: cfg.clone(),
        })
    }

    /// `stages` are fused stages 1-3 followed by the raw stage 4.
    pub fn decode(&self, stages: &[Tensor], image_size: (usize, usize)) -> Result<SegmentationOutput> {
        if stages.len() != 4 {
            return Err(Error::Contract(format!("decoder expects 4 stages, got {}", stages.len())));
        }
        let mut p = self.lateral[3].forward(&stages[3])?;
        let mut levels = vec![p.clone()];
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(&stages[i])?;
            let (_, _, h, w) = lat.dims4()?;
            p = (lat + ops::resize_bilinear(&p, h, w)?)?;
            levels.push(p.clone());
        }
        // levels: 1/32, 1/16, 1/8, 1/4
        let pixel = self.smooth.forward(&p)?;
        let b = pixel.dim(0)?;
        let (nq, d) = self.queries.dims2()?;
        let mut q = self.queries.unsqueeze(0)?.broadcast_as((b, nq, d))?.contiguous()?;
        for (round, level) in self.rounds.iter().zip(&levels[1..]) {
            q = round.forward(&q, &to_tokens(level)?)?;
        }
        let class_logits = self.class_head.forward(&q)?;
        let embed = self.mask2.forward(&self.mask1.forward(&q)?.relu()?)?;
        let (_, _, h4, w4) = pixel.dims4()?;
        let low = embed
            .matmul(&pixel.reshape((b, d, h4 * w4))?)?
            .reshape((b, nq, h4, w4))?;
        let mask_logits = ops::resize_bilinear(&low, image_size.0, image_size.1)?;
        let per_pixel_logits = aggregate(&class_logits, &ops::sigmoid(&mask_logits)?)?;
        Ok(SegmentationOutput {
            per_pixel_logits,
            mask_logits,
            class_logits,
        })
    }
}

fn check_labels(gt: &Tensor, num_classes: usize) -> Result<Vec<u32>> {
    let labels = gt.flatten_all()?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} is out of range for {num_classes} classes"
        )));
    }
    Ok(labels)
}

/// Mean per-pixel cross-entropy of `(B, C, H, W)` logits against a `(B, H, W)` map.
pub fn cross_entropy(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let c = logits.dim(1)?;
    check_labels(gt, c)?;
    let lp = ops::log_softmax(logits, 1)?;
    let idx = gt.to_dtype(DType::U32)?.unsqueeze(1)?.contiguous()?;
    Ok(lp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Per-image greedy assignment: classes by decreasing area each take the free
/// query with the highest probability for that class. Returns `(query, class)`.
pub fn greedy_match(probs: &[Vec<f64>], areas: &[usize]) -> Vec<(usize, usize)> {
    let mut classes: Vec<usize> = (0..areas.len()).filter(|&c| areas[c] > 0).collect();
    classes.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut taken = vec![false; probs.len()];
    let mut out = Vec::new();
    for c in classes {
        let best = (0..probs.len())
            .filter(|&q| !taken[q])
            .max_by(|&a, &b| probs[a][c].total_cmp(&probs[b][c]).then(b.cmp(&a)));
        if let Some(q) = best {
            taken[q] = true;
            out.push((q, c));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SegLoss {
    pub cross_entropy: Tensor,
    pub mask: Tensor,
    pub class: Tensor,
    pub total: Tensor,
}

pub fn seg_loss(out: &SegmentationOutput, gt: &Tensor, no_object_weight: f64) -> Result<SegLoss> {
    let (b, nq, h, w) = out.mask_logits.dims4()?;
    let c = out.per_pixel_logits.dim(1)?;
    let (gb, gh, gw) = gt.dims3()?;
    if (gb, gh, gw) != (b, h, w) {
        return Err(Error::Contract(format!(
            "segmentation target {gb}x{gh}x{gw} does not match output {b}x{h}x{w}"
        )));
    }
    let labels = check_labels(gt, c)?;
    let ce = cross_entropy(&out.per_pixel_logits, gt)?;

    let probs = ops::softmax(&out.class_logits.detach(), 2)?
        .to_dtype(DType::F64)?
        .to_vec3::<f64>()?;
    let hw = h * w;
    let mut mask_target = vec![0f32; b * nq * hw];
    let mut mask_weight = vec![0f32; b * nq];
    let mut class_target = vec![c as u32; b * nq];
    let mut class_weight = vec![no_object_weight as f32; b * nq];
    for i in 0..b {
        let img = &labels[i * hw..(i + 1) * hw];
        let mut areas = vec![0usize; c];
        for &l in img {
            areas[l as usize] += 1;
        }
        for (q, cls) in greedy_match(&probs[i], &areas) {
            let slot = i * nq + q;
            mask_weight[slot] = 1.0;
            class_target[slot] = cls as u32;
            class_weight[slot] = 1.0;
            let dst = &mut mask_target[slot * hw..(slot + 1) * hw];
            for (d, &l) in dst.iter_mut().zip(img) {
                *d = if l as usize == cls { 1.0 } else { 0.0 };
            }
        }
    }
    let dev = out.mask_logits.device();
    let dt = out.mask_logits.dtype();
    let matched: f32 = mask_weight.iter().sum();
    let y = Tensor::from_vec(mask_target, (b, nq, h, w), dev)?.to_dtype(dt)?;
    let x = &out.mask_logits;
    let bce = (ops::softplus(x)? - (x * y)?)?.mean_keepdim(3)?.mean_keepdim(2)?.reshape((b, nq))?;
    let mw = Tensor::from_vec(mask_weight, (b, nq), dev)?.to_dtype(dt)?;
    let mask = ((bce * mw)?.sum_all()? / matched.max(1.0) as f64)?;

    let lp = ops::log_softmax(&out.class_logits, 2)?;
    let ct = Tensor::from_vec(class_target, (b, nq, 1), dev)?;
    let nll = lp.gather(&ct, 2)?.squeeze(2)?.neg()?;
    let total_w: f32 = class_weight.iter().sum();
    let cw = Tensor::from_vec(class_weight, (b, nq), dev)?.to_dtype(dt)?;
    let class = ((nll * cw)?.sum_all()? / total_w as f64)?;

    let total = ((&ce + &mask)? + &class)?;
    Ok(SegLoss {
        cross_entropy: ce,
        mask,
        class,
        total,
    })
}

/// Convenience for tests and tooling: a class map tensor from labels.
pub fn class_map(labels: Vec<u32>, b: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels, (b, h, w), &Device::Cpu)?)
}
