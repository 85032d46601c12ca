//! Basic layers. Everything is NCHW unless stated otherwise.

use candle_core::{Tensor, D};

use super::ops;
use super::params::{Init, Scope};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square kernel, "same"-style padding of `kernel / 2`.
    pub fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_padding(s, c_in, c_out, kernel, stride, kernel / 2, true)
    }

    pub fn no_bias(s: &Scope, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_padding(s, c_in, c_out, kernel, 1, kernel / 2, false)
    }

    pub fn with_padding(
        s: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = s.get("weight", (c_out, c_in, kernel, kernel), Init::fan_in(fan_in))?;
        let bias = if bias {
            Some(s.get("bias", c_out, Init::fan_in(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Dense layer acting on the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = s.get("weight", (d_out, d_in), Init::fan_in(d_in))?;
        let bias = s.get("bias", d_out, Init::fan_in(d_in))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Group normalisation over `(C / groups, H, W)` blocks with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &Scope, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} does not divide {channels} channels"
            )));
        }
        Ok(Self {
            gamma: s.get("gamma", channels, Init::Ones)?,
            beta: s.get("beta", channels, Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// The normalised activations before the affine transform.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.reshape((b, c, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.normalize(x)?;
        let n = n.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?;
        Ok(n.broadcast_add(&self.beta.reshape((1, (), 1, 1))?)?)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }
}

/// Layer normalisation over the channel dim of an NCHW tensor (per pixel).
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", channels, Init::Ones)?,
            beta: s.get("beta", channels, Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let n = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let n = n.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?;
        Ok(n.broadcast_add(&self.beta.reshape((1, (), 1, 1))?)?)
    }
}

/// Layer normalisation over the last dim.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", dim, Init::Ones)?,
            beta: s.get("beta", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let n = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(n.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Root-mean-square normalisation over the last dim with a learned gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: s.get("gain", dim, Init::Ones)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        let n = x.broadcast_div(&(ms + self.eps)?.sqrt()?)?;
        Ok(n.broadcast_mul(&self.gain)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn group_norm_rejects_non_dividing_groups() {
        let store = ParamStore::new(DType::F32, 0);
        assert!(matches!(
            GroupNorm::new(&store.root(), 12, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn group_norm_statistics() {
        let store = ParamStore::new(DType::F64, 0);
        let gn = GroupNorm::new(&store.root(), 8, 2).unwrap();
        let x = Tensor::randn(3.0f64, 2.0, (2, 8, 5, 5), &Device::Cpu).unwrap();
        let n = gn.normalize(&x).unwrap().reshape((2, 2, 100)).unwrap();
        let mean = n.mean(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let var = n.sqr().unwrap().mean(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for m in mean {
            assert!(m.abs() < 1e-10);
        }
        for v in var {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_output_shape() {
        let store = ParamStore::new(DType::F32, 0);
        let conv = Conv2d::new(&store.root(), 3, 8, 4, 4).unwrap();
        let conv = Conv2d { padding: 0, ..conv };
        let x = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 8, 8, 16]);
    }
}
