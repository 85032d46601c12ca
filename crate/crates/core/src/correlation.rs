//! All-pairs correlation volume, its average-pooled pyramid, and windowed lookups.
//!
//! Stereo volumes are row-restricted and stored as `(B*h, w_t, w_s)`; flow
//! volumes hold every target/source pair as `(B*h*w, h_s, w_s)`. Pooling only
//! ever touches the source axes.

use candle_core::{DType, Tensor};

use crate::data::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrFeatureSource {
    /// Stage-1 output (also the late tap).
    Stage,
    /// First block of stage 1.
    Early,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrConfig {
    pub radius: usize,
    pub levels: usize,
    pub features: CorrFeatureSource,
}

impl Default for CorrConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            levels: 3,
            features: CorrFeatureSource::Stage,
        }
    }
}

impl CorrConfig {
    pub fn channels(&self, mode: Mode) -> usize {
        let win = 2 * self.radius + 1;
        match mode {
            Mode::Stereo => self.levels * win,
            Mode::Flow => self.levels * win * win,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorrelationPyramid {
    pub mode: Mode,
    /// `[P_1, P_2, ...]`; see the module docs for the layout.
    pub levels: Vec<Tensor>,
    /// `(B, h, w)` of the target grid.
    pub base: (usize, usize, usize),
}

/// `V[p, q] = sum_c F_t(p, c) * F_s(q, c)` without normalisation.
pub fn build_volume(target: &Tensor, source: &Tensor, mode: Mode) -> Result<Tensor> {
    if target.dims() != source.dims() {
        return Err(Error::Contract(format!(
            "correlation features differ in shape: {:?} vs {:?}",
            target.dims(),
            source.dims()
        )));
    }
    let (b, c, h, w) = target.dims4()?;
    match mode {
        Mode::Stereo => {
            let t = target.permute((0, 2, 3, 1))?.reshape((b * h, w, c))?;
            let s = source.permute((0, 2, 1, 3))?.reshape((b * h, c, w))?;
            Ok(t.matmul(&s)?)
        }
        Mode::Flow => {
            let t = target.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
            let s = source.reshape((b, c, h * w))?;
            Ok(t.matmul(&s)?.reshape((b * h * w, h, w))?)
        }
    }
}

/// Repeated 2x average pooling over the source axes.
pub fn build_pyramid(volume: &Tensor, mode: Mode, base: (usize, usize, usize), levels: usize) -> Result<CorrelationPyramid> {
    if levels == 0 {
        return Err(Error::Config("correlation pyramid needs at least one level".into()));
    }
    let (n, a, bdim) = volume.dims3()?;
    let mut out = Vec::with_capacity(levels);
    out.push(volume.clone());
    let mut cur = volume.reshape((n, 1, a, bdim))?;
    for _ in 1..levels {
        cur = match mode {
            Mode::Stereo => cur.avg_pool2d((1, 2))?,
            Mode::Flow => cur.avg_pool2d((2, 2))?,
        };
        let (_, _, x, y) = cur.dims4()?;
        out.push(cur.reshape((n, x, y))?);
    }
    Ok(CorrelationPyramid {
        mode,
        levels: out,
        base,
    })
}

pub fn build(target: &Tensor, source: &Tensor, mode: Mode, levels: usize) -> Result<CorrelationPyramid> {
    let (b, _, h, w) = target.dims4()?;
    let v = build_volume(target, source, mode)?;
    build_pyramid(&v, mode, (b, h, w), levels)
}

struct Taps {
    idx: Vec<u32>,
    weight: Vec<f64>,
}

impl Taps {
    fn with_capacity(n: usize) -> Self {
        Self {
            idx: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
        }
    }
}

/// Clamped linear interpolation taps along one axis.
fn lerp_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let p = pos.clamp(0.0, (len - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

impl CorrelationPyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Samples every level in a `±radius` window around the displaced position.
    ///
    /// `current` is `(B, 2, h, w)` in units of the pyramid's base grid. Returns
    /// `(B, levels * (2r+1), h, w)` for stereo and `(B, levels * (2r+1)^2, h, w)`
    /// for flow. Positions outside the volume are clamped to its border.
    pub fn lookup(&self, current: &Tensor, radius: usize) -> Result<Tensor> {
        let (b, h, w) = self.base;
        if current.dims() != [b, 2, h, w] {
            return Err(Error::Contract(format!(
                "lookup field has shape {:?}, expected [{b}, 2, {h}, {w}]",
                current.dims()
            )));
        }
        let field: Vec<f64> = current
            .detach()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let dtype = self.levels[0].dtype();
        let dev = self.levels[0].device().clone();
        let r = radius as i64;
        let win = 2 * radius + 1;
        let at = |bi: usize, c: usize, y: usize, x: usize| field[((bi * 2 + c) * h + y) * w + x];
        let mut per_level = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let scale = (1u64 << l) as f64;
            match self.mode {
                Mode::Stereo => {
                    let (rows, wt, ws) = level.dims3()?;
                    debug_assert_eq!((rows, wt), (b * h, w));
                    let n = rows * wt * win;
                    let (mut lo, mut hi) = (Taps::with_capacity(n), Taps::with_capacity(n));
                    for bi in 0..b {
                        for y in 0..h {
                            for x in 0..w {
                                let centre = (x as f64 + at(bi, 0, y, x)) / scale;
                                for k in -r..=r {
                                    let (i0, i1, f) = lerp_taps(centre + k as f64, ws);
                                    lo.idx.push(i0 as u32);
                                    lo.weight.push(1.0 - f);
                                    hi.idx.push(i1 as u32);
                                    hi.weight.push(f);
                                }
                            }
                        }
                    }
                    let shape = (rows, wt, win);
                    let mut acc: Option<Tensor> = None;
                    for taps in [lo, hi] {
                        let idx = Tensor::from_vec(taps.idx, shape, &dev)?;
                        let wgt = Tensor::from_vec(taps.weight, shape, &dev)?.to_dtype(dtype)?;
                        let s = (level.gather(&idx, 2)? * wgt)?;
                        acc = Some(match acc {
                            Some(a) => (a + s)?,
                            None => s,
                        });
                    }
                    per_level.push(acc.unwrap().reshape((b, h, w, win))?);
                }
                Mode::Flow => {
                    let (n_t, hs, ws) = level.dims3()?;
                    debug_assert_eq!(n_t, b * h * w);
                    let flat = level.reshape((b, h * w, hs * ws))?;
                    let taps_n = b * h * w * win * win;
                    let mut corners: Vec<Taps> = (0..4).map(|_| Taps::with_capacity(taps_n)).collect();
                    for bi in 0..b {
                        for y in 0..h {
                            for x in 0..w {
                                let cx = (x as f64 + at(bi, 0, y, x)) / scale;
                                let cy = (y as f64 + at(bi, 1, y, x)) / scale;
                                for dy in -r..=r {
                                    let (y0, y1, fy) = lerp_taps(cy + dy as f64, hs);
                                    for dx in -r..=r {
                                        let (x0, x1, fx) = lerp_taps(cx + dx as f64, ws);
                                        let entries = [
                                            (y0 * ws + x0, (1.0 - fy) * (1.0 - fx)),
                                            (y0 * ws + x1, (1.0 - fy) * fx),
                                            (y1 * ws + x0, fy * (1.0 - fx)),
                                            (y1 * ws + x1, fy * fx),
                                        ];
                                        for (t, (i, wgt)) in corners.iter_mut().zip(entries) {
                                            t.idx.push(i as u32);
                                            t.weight.push(wgt);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let shape = (b, h * w, win * win);
                    let mut acc: Option<Tensor> = None;
                    for taps in corners {
                        let idx = Tensor::from_vec(taps.idx, shape, &dev)?;
                        let wgt = Tensor::from_vec(taps.weight, shape, &dev)?.to_dtype(dtype)?;
                        let s = (flat.gather(&idx, 2)? * wgt)?;
                        acc = Some(match acc {
                            Some(a) => (a + s)?,
                            None => s,
                        });
                    }
                    per_level.push(acc.unwrap().reshape((b, h, w, win * win))?);
                }
            }
        }
        let cat = Tensor::cat(&per_level, 3)?;
        Ok(cat.permute((0, 3, 1, 2))?.contiguous()?)
    }
}
