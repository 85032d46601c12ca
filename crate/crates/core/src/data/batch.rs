//! Stacking collections into NCHW tensors.

use candle_core::{DType, Device, Tensor};

use super::{ImageCollection, Mode, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: Mode,
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub target: Tensor,
    pub source: Tensor,
    /// `(B, 2, H, W)` pixels.
    pub correspondence: Option<Tensor>,
    /// `(B, 1, H, W)` in `{0, 1}`.
    pub valid: Option<Tensor>,
    /// `(B, H, W)` u32 class indices.
    pub segmentation: Option<Tensor>,
}

/// HWC raster to a `(C, H, W)` tensor.
pub fn raster_to_chw(r: &Raster<f32>, dtype: DType, dev: &Device) -> Result<Tensor> {
    let t = Tensor::from_slice(&r.data, (r.height, r.width, r.channels), dev)?;
    Ok(t.permute((2, 0, 1))?.contiguous()?.to_dtype(dtype)?)
}

/// `(C, H, W)` or `(1, C, H, W)` tensor back to an HWC raster.
pub fn chw_to_raster(t: &Tensor) -> Result<Raster<f32>> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    let data = t
        .permute((1, 2, 0))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(Raster::from_vec(h, w, c, data))
}

impl Batch {
    pub fn from_collections(items: &[&ImageCollection], dtype: DType, dev: &Device) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mode = first.mode;
        let (h, w) = (first.height(), first.width());
        for c in items {
            if c.mode != mode || (c.height(), c.width()) != (h, w) {
                return Err(Error::Contract("batch items differ in mode or size".into()));
            }
        }
        let stack = |f: &dyn Fn(&ImageCollection) -> Option<&Raster<f32>>| -> Result<Option<Tensor>> {
            if items.iter().all(|c| f(c).is_some()) {
                let ts = items
                    .iter()
                    .map(|c| raster_to_chw(f(c).unwrap(), dtype, dev))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(Tensor::stack(&ts, 0)?))
            } else {
                Ok(None)
            }
        };
        let target = stack(&|c| Some(&c.target))?.unwrap();
        let source = stack(&|c| Some(&c.source))?.unwrap();
        let correspondence = stack(&|c| c.correspondence.as_ref())?;
        let valid = match (&correspondence, stack(&|c| c.valid.as_ref())?) {
            (Some(_), None) => Some(Tensor::ones((items.len(), 1, h, w), dtype, dev)?),
            (_, v) => v,
        };
        let segmentation = if items.iter().all(|c| c.segmentation.is_some()) {
            let ts = items
                .iter()
                .map(|c| {
                    let s = c.segmentation.as_ref().unwrap();
                    let v: Vec<u32> = s.data.iter().map(|&k| k as u32).collect();
                    Tensor::from_vec(v, (h, w), dev)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(Tensor::stack(&ts, 0)?)
        } else {
            None
        };
        Ok(Self {
            mode,
            target,
            source,
            correspondence,
            valid,
            segmentation,
        })
    }

    pub fn size(&self) -> usize {
        self.target.dims()[0]
    }
}
