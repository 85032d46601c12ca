//! Cross-task adapter: projects the final GRU states into the contextual
//! feature space and fuses them with the encoder stages through two chained
//! linear-attention blocks.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Linear, RmsNorm, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    LinearAttention,
    /// Contextual features pass through untouched.
    Identity,
    /// Element-wise sum of contextual and aligned hidden features.
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtaConfig {
    pub mode: FuseMode,
    pub heads: usize,
    pub eps: f64,
    /// Add the query source back onto each attention block's output.
    pub residual: bool,
}

impl Default for CtaConfig {
    fn default() -> Self {
        Self {
            mode: FuseMode::LinearAttention,
            heads: 1,
            eps: 1e-6,
            residual: true,
        }
    }
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` to `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::Contract(format!("{n} tokens do not fill {h}x{w}")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Numerator and denominator of kernelised attention, evaluated right to left.
/// Inputs are `(B, heads, N, d)` feature-mapped queries and keys and values.
pub fn linear_terms(phi_q: &Tensor, phi_k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let kv = phi_k.transpose(2, 3)?.contiguous()?.matmul(v)?;
    let num = phi_q.matmul(&kv)?;
    let ksum = phi_k.sum_keepdim(2)?.transpose(2, 3)?.contiguous()?;
    let den = phi_q.matmul(&ksum)?;
    Ok((num, den))
}

#[derive(Debug, Clone)]
pub struct LinearAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    norm: RmsNorm,
    mlp1: Linear,
    mlp2: Linear,
    heads: usize,
    eps: f64,
    residual: bool,
}

impl LinearAttention {
    pub fn new(s: &Scope, channels: usize, cfg: &CtaConfig) -> Result<Self> {
        if cfg.heads == 0 || channels % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {channels} channels",
                cfg.heads
            )));
        }
        Ok(Self {
            q: Linear::new(&s.pp("q"), channels, channels)?,
            k: Linear::new(&s.pp("k"), channels, channels)?,
            v: Linear::new(&s.pp("v"), channels, channels)?,
            norm: RmsNorm::new(&s.pp("norm"), channels)?,
            mlp1: Linear::new(&s.pp("mlp1"), channels, 2 * channels)?,
            mlp2: Linear::new(&s.pp("mlp2"), 2 * channels, channels)?,
            heads: cfg.heads,
            eps: cfg.eps,
            residual: cfg.residual,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, n, d) = x.dims4()?;
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?)
    }

    /// Normalised attention output on tokens, before the norm, MLP and residual.
    pub fn attend(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let phi_q = ops::elu_plus_one(&self.split_heads(&self.q.forward(query)?)?)?;
        let phi_k = ops::elu_plus_one(&self.split_heads(&self.k.forward(kv)?)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let (num, den) = linear_terms(&phi_q, &phi_k, &v)?;
        let out = num.broadcast_div(&(den + self.eps)?)?;
        self.merge_heads(&out)
    }

    /// Token-level block: `MLP(RMSNorm(attend)) (+ query)`.
    pub fn forward_tokens(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let a = self.norm.forward(&self.attend(query, kv)?)?;
        let y = self.mlp2.forward(&ops::gelu(&self.mlp1.forward(&a)?)?)?;
        if self.residual {
            Ok((y + query)?)
        } else {
            Ok(y)
        }
    }

    /// Map-level block on `(B, C, H, W)` inputs.
    pub fn forward(&self, query_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let (_, cq, h, w) = query_src.dims4()?;
        let ck = kv_src.dim(1)?;
        if cq != ck {
            return Err(Error::Contract(format!(
                "query has {cq} channels but keys have {ck}"
            )));
        }
        let out = self.forward_tokens(&to_tokens(query_src)?, &to_tokens(kv_src)?)?;
        from_tokens(&out, h, w)
    }
}

/// Resizes each final hidden state to its contextual stage and projects it to
/// that stage's channel count.
#[derive(Debug, Clone)]
pub struct HiddenAligner {
    proj: Vec<Conv2d>,
}

impl HiddenAligner {
    pub fn new(s: &Scope, hidden: usize, channels: &[usize]) -> Result<Self> {
        let proj = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&s.pp(format!("proj{i}")), hidden, c, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { proj })
    }

    /// `shapes` holds `(H_i, W_i)` of the contextual stages.
    pub fn align(&self, hidden: &[Tensor], shapes: &[(usize, usize)]) -> Result<Vec<Tensor>> {
        if hidden.len() != self.proj.len() || shapes.len() != self.proj.len() {
            return Err(Error::Contract(format!(
                "expected {} hidden levels and shapes, got {} and {}",
                self.proj.len(),
                hidden.len(),
                shapes.len()
            )));
        }
        hidden
            .iter()
            .zip(shapes)
            .zip(&self.proj)
            .map(|((h, &(th, tw)), p)| p.forward(&ops::resize_bilinear(h, th, tw)?))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CrossTaskAdapter {
    pub aligner: HiddenAligner,
    /// Per level: hidden-to-context projection, then context re-selection.
    blocks: Vec<(LinearAttention, LinearAttention)>,
    pub config: CtaConfig,
}

impl CrossTaskAdapter {
    /// `channels` are the first three contextual stage widths.
    pub fn new(s: &Scope, hidden: usize, channels: &[usize], cfg: &CtaConfig) -> Result<Self> {
        let aligner = HiddenAligner::new(&s.pp("align"), hidden, channels)?;
        let mut blocks = Vec::new();
        if cfg.mode == FuseMode::LinearAttention {
            for (i, &c) in channels.iter().enumerate() {
                let l = s.pp(format!("level{i}"));
                blocks.push((
                    LinearAttention::new(&l.pp("project"), c, cfg)?,
                    LinearAttention::new(&l.pp("select"), c, cfg)?,
                ));
            }
        }
        Ok(Self {
            aligner,
            blocks,
            config: cfg.clone(),
        })
    }

    /// Fuses stages 1-3 with the final hidden states; the last stage passes through.
    pub fn fuse(&self, contextual: &[Tensor], hidden: &[Tensor]) -> Result<Vec<Tensor>> {
        let n = self.aligner.proj.len();
        if contextual.len() != n + 1 || hidden.len() != n {
            return Err(Error::Contract(format!(
                "fuse expects {} contextual stages and {n} hidden levels, got {} and {}",
                n + 1,
                contextual.len(),
                hidden.len()
            )));
        }
        if self.config.mode == FuseMode::Identity {
            return Ok(contextual.to_vec());
        }
        let shapes = contextual[..n]
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4()?;
                Ok((h, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let aligned = self.aligner.align(hidden, &shapes)?;
        let mut out = Vec::with_capacity(n + 1);
        for (i, (f, h)) in contextual.iter().zip(&aligned).enumerate() {
            out.push(match self.config.mode {
                FuseMode::Add => (f + h)?,
                _ => {
                    let (project, select) = &self.blocks[i];
                    let g = project.forward(f, h)?;
                    select.forward(&g, f)?
                }
            });
        }
        out.push(contextual[n].clone());
        Ok(out)
    }
}

/// Softmax-free quadratic evaluation of the same numerator and denominator.
pub fn quadratic_terms(phi_q: &Tensor, phi_k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let scores = phi_q.matmul(&phi_k.transpose(2, 3)?.contiguous()?)?;
    let num = scores.matmul(v)?;
    let den = scores.sum_keepdim(D::Minus1)?;
    Ok((num, den))
}
