//! Patch extraction for "same" convolutions at stride 1, as custom ops so the
//! gradient is a single scatter-add instead of one padded copy per tap.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

/// `(B, C, H, W)` to `(B, C*k*k, H*W)`, zero outside the image.
#[derive(Debug, Clone, Copy)]
struct Im2Col {
    k: usize,
    pad: usize,
    dims: (usize, usize, usize, usize),
}

/// Adjoint of [`Im2Col`]: `(B, C*k*k, H*W)` back to `(B, C, H, W)` by summation.
#[derive(Debug, Clone, Copy)]
struct Col2Im {
    k: usize,
    pad: usize,
    dims: (usize, usize, usize, usize),
}

/// Visits every (image offset, column offset) pair with a valid source pixel.
fn for_each_tap(k: usize, pad: usize, dims: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
    let (b, c, h, w) = dims;
    let hw = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let img = (bi * c + ci) * hw;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((bi * c + ci) * k * k + ky * k + kx) * hw;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(w);
                        for x in x_lo..x_hi {
                            let ix = x + kx - pad;
                            f(img + iy as usize * w + ix, row + y * w + x);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, $run:ident($($arg:expr),*)) => {
        match $storage {
            CpuStorage::F32(d) => CpuStorage::F32($run(contiguous(d, $layout)?, $($arg),*)),
            CpuStorage::F64(d) => CpuStorage::F64($run(contiguous(d, $layout)?, $($arg),*)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into())),
        }
    };
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let (k, pad, dims) = (self.k, self.pad, self.dims);
        fn run<T: Copy + Default>(src: &[T], k: usize, pad: usize, dims: (usize, usize, usize, usize)) -> Vec<T> {
            let (b, c, h, w) = dims;
            let mut out = vec![T::default(); b * c * k * k * h * w];
            for_each_tap(k, pad, dims, |i, o| out[o] = src[i]);
            out
        }
        let out = dispatch!(storage, layout, run(k, pad, dims));
        Ok((out, Shape::from((b, c * k * k, h * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im { k: self.k, pad: self.pad, dims: self.dims };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let (k, pad, dims) = (self.k, self.pad, self.dims);
        fn run<T: Copy + Default + std::ops::AddAssign>(
            src: &[T],
            k: usize,
            pad: usize,
            dims: (usize, usize, usize, usize),
        ) -> Vec<T> {
            let (b, c, h, w) = dims;
            let mut out = vec![T::default(); b * c * h * w];
            for_each_tap(k, pad, dims, |i, o| out[i] += src[o]);
            out
        }
        let out = dispatch!(storage, layout, run(k, pad, dims));
        Ok((out, Shape::from((b, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Im2Col { k: self.k, pad: self.pad, dims: self.dims };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// Columns for a `k x k` convolution with `pad` zero padding at stride 1 that
/// keeps the spatial size (`pad = k / 2`, odd `k`).
pub fn im2col(x: &Tensor, k: usize, pad: usize) -> Result<Tensor> {
    let dims = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Im2Col { k, pad, dims })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::to_f64_vec;
    use candle_core::{Device, Var};

    #[test]
    fn matches_shifted_slices() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &Device::Cpu).unwrap();
        let cols = im2col(&x, 3, 1).unwrap();
        let xp = x.pad_with_zeros(2, 1, 1).unwrap().pad_with_zeros(3, 1, 1).unwrap();
        let mut taps = Vec::new();
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(xp.narrow(2, dy, 5).unwrap().narrow(3, dx, 4).unwrap());
            }
        }
        let reference = Tensor::stack(&taps, 2).unwrap().reshape((2, 27, 20)).unwrap();
        assert_eq!(to_f64_vec(&cols).unwrap(), to_f64_vec(&reference).unwrap());
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <im2col(x), g> == <x, col2im(g)> for all x, g.
        let x = Var::randn(0f64, 1.0, (1, 2, 4, 6), &Device::Cpu).unwrap();
        let g = Tensor::randn(0f64, 1.0, (1, 18, 24), &Device::Cpu).unwrap();
        let lhs = (im2col(&x, 3, 1).unwrap() * &g).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let adj = grads.get(x.as_tensor()).unwrap();
        let rhs = (x.as_tensor() * adj).unwrap().sum_all().unwrap();
        let (a, b) = (lhs.to_scalar::<f64>().unwrap(), rhs.to_scalar::<f64>().unwrap());
        assert!((a - b).abs() < 1e-10);
    }
}
