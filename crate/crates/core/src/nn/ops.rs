//! Differentiable tensor helpers built from candle primitives.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// `(tanh(x/2) + 1) / 2`, finite in both passes for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Numerically stable softmax; the subtracted maximum is treated as a constant.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` computed as `relu(x) + log(1 + exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Positive feature map for linear attention: `ELU(x) + 1`.
///
/// Evaluated as `relu(x) + exp(min(x, 0))`, which equals `x + 1` for positive
/// inputs and `exp(x)` otherwise, without the cancellation of `(exp(x) - 1) + 1`.
pub fn elu_plus_one(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + x.minimum(0.0)?.exp()?)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// 2-D convolution lowered to matrix products where possible, which keeps
/// the backward pass on the GEMM path: 1x1 kernels, "same" odd kernels at
/// stride 1 (im2col) and non-overlapping patch embeddings.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c_in, h, wd) = x.dims4()?;
    let (c_out, _, kh, kw) = w.dims4()?;
    let cols = if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        Some((x.reshape((b, c_in, h * wd))?, h, wd))
    } else if kh == kw && kh % 2 == 1 && stride == 1 && padding == kh / 2 {
        let cols = super::im2col::im2col(x, kh, padding)?;
        Some((cols, h, wd))
    } else if kh == kw && kh == stride && padding == 0 && h % kh == 0 && wd % kw == 0 {
        let (oh, ow) = (h / kh, wd / kw);
        let cols = x
            .reshape((b * c_in, oh, kh, ow, kw))?
            .permute((0, 2, 4, 1, 3))?
            .contiguous()?
            .reshape((b, c_in * kh * kw, oh * ow))?;
        Some((cols, oh, ow))
    } else {
        None
    };
    match cols {
        Some((cols, oh, ow)) => {
            let wm = w.reshape((c_out, ()))?;
            Ok(wm.broadcast_matmul(&cols)?.reshape((b, c_out, oh, ow))?)
        }
        None => Ok(x.conv2d(w, padding, stride, 1, 1)?),
    }
}

/// Interpolation matrix of shape `(out, in)` for 1-D linear resampling with
/// half-pixel centres (the `align_corners = false` convention).
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

fn resize_matrix_tensor(input: usize, output: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let m = linear_resize_matrix(input, output);
    Ok(Tensor::from_vec(m, (output, input), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of an NCHW tensor. Same-size resizes return the input unchanged.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut y = x.clone();
    if w != out_w {
        let rx = resize_matrix_tensor(w, out_w, x.dtype(), x.device())?.t()?;
        y = y.broadcast_matmul(&rx)?;
    }
    if h != out_h {
        let ry = resize_matrix_tensor(h, out_h, x.dtype(), x.device())?;
        y = ry.broadcast_matmul(&y.contiguous()?)?;
    }
    Ok(y)
}

/// 2x2 average pooling with stride 2 over the spatial dims of an NCHW tensor.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d((2, 2))?)
}

/// Mean over the trailing spatial dims, keeping them as size-1 dims.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

/// Reads every value of a tensor into a flat `f64` vector.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn all_finite(x: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(x)?.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
        x.conv2d(w, padding, stride, 1, 1).unwrap()
    }

    #[test]
    fn sigmoid_gradient_is_finite_at_extremes() {
        let x = candle_core::Var::new(&[-1000f32, -90.0, 0.0, 90.0, 1000.0], &Device::Cpu).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert_eq!(y.to_vec1::<f32>().unwrap()[2], 0.5);
    }

    #[test]
    fn lowered_conv_matches_direct() {
        let dev = Device::Cpu;
        for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (5, 1, 2), (2, 2, 0), (4, 4, 0), (3, 2, 1)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 12), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (5, 3, k, k), &dev).unwrap();
            let a = conv2d(&x, &w, stride, pad).unwrap();
            let b = direct_conv(&x, &w, stride, pad);
            assert_eq!(a.dims(), b.dims());
            let d = to_f64_vec(&(a - b).unwrap().abs().unwrap()).unwrap();
            assert!(d.iter().all(|&v| v < 1e-10), "k={k} stride={stride}");
        }
    }

    #[test]
    fn lowered_conv_gradients_match_direct() {
        let dev = Device::Cpu;
        for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (2, 2, 0)] {
            let x = candle_core::Var::randn(0f64, 1.0, (1, 2, 6, 6), &dev).unwrap();
            let w = candle_core::Var::randn(0f64, 1.0, (3, 2, k, k), &dev).unwrap();
            let g1 = conv2d(&x, &w, stride, pad).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = direct_conv(&x, &w, stride, pad).sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), w.as_tensor()] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap();
                assert!(to_f64_vec(&d.abs().unwrap()).unwrap().iter().all(|&e| e < 1e-9));
            }
        }
    }

    #[test]
    fn resize_matrix_rows_sum_to_one() {
        for (i, o) in [(4, 16), (16, 4), (5, 7), (8, 8)] {
            let m = linear_resize_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let m = linear_resize_matrix(6, 6);
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m[r * 6 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2., 3.], [-100., 0., 100.]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax(&x, 1).unwrap().exp().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in ls {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_matches_direct_form() {
        let x = Tensor::new(&[-30f64, -1., 0., 2., 40.], &Device::Cpu).unwrap();
        let got = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (g, v) in got.iter().zip([-30f64, -1., 0., 2., 40.]) {
            assert!((g - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn elu_plus_one_is_positive() {
        let x = Tensor::new(&[-300f64, -50., -3., 0., 3.], &Device::Cpu).unwrap();
        let y = elu_plus_one(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|&v| v > 0.0));
        assert_eq!(y[4], 4.0);
        assert_eq!(y[3], 1.0);
    }
}
