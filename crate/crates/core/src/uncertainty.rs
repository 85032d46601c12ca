//! Aleatoric uncertainty from iteration fluctuations, Laplace NLL and a
//! histogram KL term that aligns predicted scales with observed residuals.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyConfig {
    pub bins: usize,
    pub lambda_kl: f64,
    /// Bound on |log σ|; also the log-range of the histogram bins.
    pub logsig_clamp: f64,
    /// Gaussian kernel width in log space, as a fraction of the bin width.
    pub bandwidth: f64,
    pub hidden: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            lambda_kl: 0.1,
            logsig_clamp: 6.0,
            bandwidth: 0.5,
            hidden: 32,
        }
    }
}

/// Squared fluctuations span many decades (1e-6 to 10 px² on converged
/// traces), so the head sees `ln(1 + ψ / FLUCTUATION_SCALE)`. Zero stays zero.
pub const FLUCTUATION_SCALE: f64 = 1e-4;

/// Squared differences of every field pair `i < j`, two channels per pair.
pub fn pairwise_features(fields: &[Tensor]) -> Result<Tensor> {
    let k = fields.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "uncertainty needs at least 2 iterations, got {k}"
        )));
    }
    let mut parts = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            parts.push((&fields[i] - &fields[j])?.sqr()?);
        }
    }
    Ok(Tensor::cat(&parts, 1)?)
}

#[derive(Debug, Clone)]
pub struct UncertaintyHead {
    l1: Conv2d,
    l2: Conv2d,
    l3: Conv2d,
    iters: usize,
    clamp: f64,
}

impl UncertaintyHead {
    pub fn new(s: &Scope, iters: usize, cfg: &UncertaintyConfig) -> Result<Self> {
        if iters < 2 {
            return Err(Error::Config(format!(
                "uncertainty needs at least 2 iterations, got {iters}"
            )));
        }
        let c_in = iters * (iters - 1);
        Ok(Self {
            l1: Conv2d::new(&s.pp("l1"), c_in, cfg.hidden, 1, 1)?,
            l2: Conv2d::new(&s.pp("l2"), cfg.hidden, cfg.hidden, 1, 1)?,
            l3: Conv2d::new(&s.pp("l3"), cfg.hidden, 1, 1, 1)?,
            iters,
            clamp: cfg.logsig_clamp,
        })
    }

    /// Clamped log σ, `(B, 1, H, W)`.
    pub fn log_sigma(&self, fields: &[Tensor]) -> Result<Tensor> {
        if fields.len() != self.iters {
            return Err(Error::Contract(format!(
                "head was built for {} iterations, trace has {}",
                self.iters,
                fields.len()
            )));
        }
        let x = ((pairwise_features(fields)? / FLUCTUATION_SCALE)? + 1.0)?.log()?;
        let x = ops::gelu(&self.l1.forward(&x)?)?;
        let x = ops::gelu(&self.l2.forward(&x)?)?;
        Ok(self.l3.forward(&x)?.clamp(-self.clamp, self.clamp)?)
    }

    /// σ > 0 at full resolution, `(B, 1, H, W)`.
    pub fn estimate(&self, fields: &[Tensor]) -> Result<Tensor> {
        Ok(self.log_sigma(fields)?.exp()?)
    }
}

/// A loss value plus a flag raised when no pixel was supervised.
#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub value: Tensor,
    pub empty: bool,
}

fn valid_count(valid: &Tensor) -> Result<f64> {
    Ok(valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero_like(x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), x.dtype(), x.device())?)
}

/// Per-pixel L1 norm of a `(B, 2, H, W)` residual, `(B, 1, H, W)`.
pub fn l1_norm(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.sum_keepdim(1)?)
}

/// Masked mean of `log(2σ) + |r|₁/σ`. Invalid pixels do not reach the value
/// or its gradient, whatever the targets hold there.
pub fn laplace_nll(pred: &Tensor, gt: &Tensor, sigma: &Tensor, valid: &Tensor) -> Result<MaskedLoss> {
    let n = valid_count(valid)?;
    if n == 0.0 {
        log::warn!("laplace_nll called with an empty valid mask");
        return Ok(MaskedLoss { value: zero_like(sigma)?, empty: true });
    }
    let keep = valid.ne(0.0)?;
    let r = l1_norm(pred, &keep.broadcast_as(gt.shape())?.where_cond(gt, pred)?)?;
    let per = ((sigma * 2.0)?.log()? + (r / sigma)?)?;
    let per = keep.where_cond(&per, &per.zeros_like()?)?;
    Ok(MaskedLoss { value: (per.sum_all()? / n)?, empty: false })
}

/// Soft histogram over `bins` log-spaced centres spanning `[-clamp, clamp]` in log space.
#[derive(Debug, Clone)]
pub struct SoftHistogram {
    pub bins: usize,
    pub clamp: f64,
    pub bandwidth: f64,
}

impl SoftHistogram {
    pub fn from_config(cfg: &UncertaintyConfig) -> Self {
        Self { bins: cfg.bins, clamp: cfg.logsig_clamp, bandwidth: cfg.bandwidth }
    }

    pub fn centres(&self) -> Vec<f64> {
        let width = 2.0 * self.clamp / self.bins as f64;
        (0..self.bins).map(|b| -self.clamp + (b as f64 + 0.5) * width).collect()
    }

    /// Normalised histogram of the positive `values` at pixels where `valid` is
    /// non-zero. `values` and `valid` share a shape; the result is `(bins,)`.
    pub fn histogram(&self, values: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let n = valid_count(valid)?;
        let floor = (-self.clamp).exp();
        let logv = values
            .flatten_all()?
            .clamp(floor, f64::MAX)?
            .log()?
            .clamp(-self.clamp, self.clamp)?
            .unsqueeze(1)?;
        let width = 2.0 * self.clamp / self.bins as f64;
        let h = self.bandwidth * width;
        let centres = Tensor::new(self.centres(), values.device())?
            .to_dtype(values.dtype())?
            .unsqueeze(0)?;
        let d = logv.broadcast_sub(&centres)?;
        let assign = ops::softmax(&(d.sqr()? * (-0.5 / (h * h)))?, 1)?;
        let mask = valid.flatten_all()?.ne(0.0)?.to_dtype(values.dtype())?.unsqueeze(1)?;
        Ok((assign.broadcast_mul(&mask)?.sum(0)? / n)?)
    }
}

/// `KL(p ‖ q)` after mixing each histogram with `eps` of the uniform distribution.
pub fn kl_divergence(p: &Tensor, q: &Tensor, eps: f64) -> Result<Tensor> {
    let b = p.dim(0)? as f64;
    let smooth = |t: &Tensor| -> Result<Tensor> { Ok(((t + eps)? / (1.0 + b * eps))?) };
    let (p, q) = (smooth(p)?, smooth(q)?);
    Ok((&p * (p.log()? - q.log()?)?)?.sum_all()?)
}

pub const KL_SMOOTHING: f64 = 1e-6;

/// Divergence of the σ histogram from the residual histogram over valid pixels.
pub fn kl_alignment(sigma: &Tensor, residuals: &Tensor, valid: &Tensor, hist: &SoftHistogram) -> Result<MaskedLoss> {
    if valid_count(valid)? == 0.0 {
        log::warn!("kl_alignment called with an empty valid mask");
        return Ok(MaskedLoss { value: zero_like(sigma)?, empty: true });
    }
    let keep = valid.ne(0.0)?;
    let residuals = keep.where_cond(residuals, &residuals.ones_like()?)?;
    let p = hist.histogram(&residuals, valid)?;
    let q = hist.histogram(sigma, valid)?;
    Ok(MaskedLoss { value: kl_divergence(&p, &q, KL_SMOOTHING)?, empty: false })
}
