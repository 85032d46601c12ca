//! Weak / strong augmentation with label transfer between the two views of the
//! same underlying collection.
//!
//! Geometry (resize, crop, flip) moves labels; photometric operations never do.
//! A weak/strong pair shares the resize factor, and the strong crop must lie
//! inside the weak crop, so a label predicted on the weak view can be carried
//! to the strong view by integer re-indexing only.

use rand::Rng;

use super::{ImageCollection, Mode, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Original `(H, W)`.
    pub input_size: (usize, usize),
    /// Resize factor applied to the whole collection before cropping.
    pub scale: f32,
    /// `(y0, x0, h, w)` in the resized frame.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            input_size: (h, w),
            scale: 1.0,
            crop: (0, 0, h, w),
            flip: false,
        }
    }

    pub fn scaled_size(&self) -> (usize, usize) {
        let (h, w) = self.input_size;
        (
            (h as f32 * self.scale).round() as usize,
            (w as f32 * self.scale).round() as usize,
        )
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.crop.2, self.crop.3)
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let (sh, sw) = self.scaled_size();
        let (y0, x0, h, w) = self.crop;
        if !(self.scale > 0.0) || h == 0 || w == 0 || y0 + h > sh || x0 + w > sw {
            return Err(Error::Contract(format!(
                "crop {:?} does not fit the resized frame {sh}x{sw}",
                self.crop
            )));
        }
        if self.flip && mode == Mode::Stereo {
            return Err(Error::Contract(
                "horizontal flips are unsupported in stereo mode: the flipped pair needs the source-view disparity"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Random crop of size `out` after a resize drawn from `scales`.
    pub fn sample<R: Rng>(
        rng: &mut R,
        input_size: (usize, usize),
        out: (usize, usize),
        scales: &[f32],
        allow_flip: bool,
    ) -> Result<Self> {
        let scale = if scales.is_empty() {
            1.0
        } else {
            scales[rng.random_range(0..scales.len())]
        };
        let mut g = Self {
            input_size,
            scale,
            crop: (0, 0, out.0, out.1),
            flip: false,
        };
        let (sh, sw) = g.scaled_size();
        if sh < out.0 || sw < out.1 {
            return Err(Error::Config(format!(
                "crop {}x{} larger than resized input {sh}x{sw}",
                out.0, out.1
            )));
        }
        g.crop.0 = rng.random_range(0..=sh - out.0);
        g.crop.1 = rng.random_range(0..=sw - out.1);
        g.flip = allow_flip && rng.random_bool(0.5);
        Ok(g)
    }

    fn resize_image(&self, img: &Raster<f32>) -> Raster<f32> {
        let (sh, sw) = self.scaled_size();
        if (sh, sw) == (img.height, img.width) {
            img.clone()
        } else {
            img.resize_bilinear(sh, sw)
        }
    }

    fn finish<T: Copy + Default>(&self, r: Raster<T>) -> Raster<T> {
        let (y0, x0, h, w) = self.crop;
        let r = r.crop(y0, x0, h, w);
        if self.flip {
            r.flip_horizontal()
        } else {
            r
        }
    }

    pub fn apply_image(&self, img: &Raster<f32>) -> Raster<f32> {
        self.finish(self.resize_image(img))
    }

    pub fn apply_classes(&self, seg: &Raster<u8>) -> Raster<u8> {
        let (sh, sw) = self.scaled_size();
        self.finish(seg.resize_nearest(sh, sw))
    }

    pub fn apply_mask(&self, mask: &Raster<f32>) -> Raster<f32> {
        let (sh, sw) = self.scaled_size();
        self.finish(mask.resize_nearest(sh, sw))
    }

    /// Resamples a correspondence field: values scale with the resize factor
    /// per axis and the horizontal component changes sign under a flip.
    pub fn apply_field(&self, field: &Raster<f32>) -> Raster<f32> {
        let (sh, sw) = self.scaled_size();
        let mut r = field.resize_nearest(sh, sw);
        let fy = sh as f32 / field.height as f32;
        let fx = sw as f32 / field.width as f32;
        for px in r.data.chunks_mut(2) {
            px[0] *= fx;
            px[1] *= fy;
        }
        let mut r = self.finish(r);
        if self.flip {
            for px in r.data.chunks_mut(2) {
                px[0] = -px[0];
            }
        }
        r
    }

    pub fn apply(&self, c: &ImageCollection) -> Result<ImageCollection> {
        self.validate(c.mode)?;
        if (c.height(), c.width()) != self.input_size {
            return Err(Error::Contract(format!(
                "geometry built for {:?} applied to {}x{}",
                self.input_size,
                c.height(),
                c.width()
            )));
        }
        Ok(ImageCollection {
            mode: c.mode,
            target: self.apply_image(&c.target),
            source: self.apply_image(&c.source),
            correspondence: c.correspondence.as_ref().map(|f| self.apply_field(f)),
            valid: c.valid.as_ref().map(|v| self.apply_mask(v)),
            segmentation: c.segmentation.as_ref().map(|s| self.apply_classes(s)),
        })
    }

    /// Resized-frame coordinates of output pixel `(y, x)`.
    fn to_resized(&self, y: usize, x: usize) -> (usize, usize) {
        let (y0, x0, _, w) = self.crop;
        let cx = if self.flip { w - 1 - x } else { x };
        (y + y0, cx + x0)
    }

    /// Output pixel of a resized-frame coordinate, if inside the crop.
    fn from_resized(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (y0, x0, h, w) = self.crop;
        if y < y0 || x < x0 || y >= y0 + h || x >= x0 + w {
            return None;
        }
        let cx = x - x0;
        Some((y - y0, if self.flip { w - 1 - cx } else { cx }))
    }
}

/// Photometric perturbation parameters for one collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Photometric {
    /// Per image (target, source): brightness, contrast, saturation, gamma.
    pub jitter: [[f32; 4]; 2],
    /// Rectangle `(y0, x0, h, w)` filled with the mean colour of the source.
    pub occlusion: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub gamma: f32,
    pub occlusion_prob: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            gamma: 0.2,
            occlusion_prob: 0.5,
        }
    }
}

impl Photometric {
    pub fn none() -> Self {
        Self {
            jitter: [[1.0; 4]; 2],
            occlusion: None,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &PhotometricConfig, size: (usize, usize)) -> Self {
        let mut jitter = [[1.0f32; 4]; 2];
        for j in jitter.iter_mut() {
            let mut draw = |spread: f32| {
                if spread > 0.0 {
                    rng.random_range(1.0 - spread..=1.0 + spread)
                } else {
                    1.0
                }
            };
            *j = [
                draw(cfg.brightness),
                draw(cfg.contrast),
                draw(cfg.saturation),
                draw(cfg.gamma),
            ];
        }
        let (h, w) = size;
        let occlusion = if rng.random_bool(cfg.occlusion_prob) && h >= 8 && w >= 8 {
            let oh = rng.random_range(h / 8..=h / 4);
            let ow = rng.random_range(w / 8..=w / 4);
            Some((rng.random_range(0..=h - oh), rng.random_range(0..=w - ow), oh, ow))
        } else {
            None
        };
        Self { jitter, occlusion }
    }

    fn jitter_image(img: &Raster<f32>, p: [f32; 4]) -> Raster<f32> {
        if p == [1.0; 4] {
            return img.clone();
        }
        let [brightness, contrast, saturation, gamma] = p;
        let n = (img.height * img.width) as f32;
        let mean_gray = img
            .data
            .chunks(3)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .sum::<f32>()
            / n;
        let mut out = img.clone();
        for px in out.data.chunks_mut(3) {
            for v in px.iter_mut() {
                *v *= brightness;
            }
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px.iter_mut() {
                *v = gray + (*v - gray) * saturation;
                *v = mean_gray * brightness + (*v - mean_gray * brightness) * contrast;
                *v = v.clamp(0.0, 1.0).powf(gamma);
            }
        }
        out
    }

    /// Applies the perturbation; labels are left untouched.
    pub fn apply(&self, c: &ImageCollection) -> ImageCollection {
        let mut out = c.clone();
        out.target = Self::jitter_image(&c.target, self.jitter[0]);
        out.source = Self::jitter_image(&c.source, self.jitter[1]);
        if let Some((y0, x0, h, w)) = self.occlusion {
            let src = &mut out.source;
            let n = (src.height * src.width) as f32;
            let mut mean = [0.0f32; 3];
            for px in src.data.chunks(3) {
                for k in 0..3 {
                    mean[k] += px[k] / n;
                }
            }
            for y in y0..(y0 + h).min(src.height) {
                for x in x0..(x0 + w).min(src.width) {
                    for (k, m) in mean.iter().enumerate() {
                        src.set(y, x, k, *m);
                    }
                }
            }
        }
        out
    }
}

/// Weak view for the teacher, strong view for the student.
#[derive(Debug, Clone)]
pub struct AugmentationPair {
    pub weak: Geometry,
    pub strong: Geometry,
    pub photometric: Photometric,
}

impl AugmentationPair {
    pub fn new(weak: Geometry, strong: Geometry, photometric: Photometric, mode: Mode) -> Result<Self> {
        weak.validate(mode)?;
        strong.validate(mode)?;
        if weak.input_size != strong.input_size || weak.scale != strong.scale {
            return Err(Error::Contract(
                "weak and strong views must share input size and resize factor".into(),
            ));
        }
        let (wy, wx, wh, ww) = weak.crop;
        let (sy, sx, sh, sw) = strong.crop;
        if sy < wy || sx < wx || sy + sh > wy + wh || sx + sw > wx + ww {
            return Err(Error::Contract(format!(
                "strong crop {:?} is not contained in weak crop {:?}",
                strong.crop, weak.crop
            )));
        }
        Ok(Self {
            weak,
            strong,
            photometric,
        })
    }

    /// Both views share one geometry; only photometric perturbations differ.
    pub fn shared(geometry: Geometry, photometric: Photometric, mode: Mode) -> Result<Self> {
        Self::new(geometry.clone(), geometry, photometric, mode)
    }

    pub fn weak_view(&self, c: &ImageCollection) -> Result<ImageCollection> {
        self.weak.apply(c)
    }

    pub fn strong_view(&self, c: &ImageCollection) -> Result<ImageCollection> {
        Ok(self.photometric.apply(&self.strong.apply(c)?))
    }

    /// Carries a field (and its validity) from the weak view to the strong view.
    pub fn transfer(&self, field: &Raster<f32>, valid: &Raster<f32>) -> Result<(Raster<f32>, Raster<f32>)> {
        let (wh, ww) = self.weak.output_size();
        if field.shape() != (wh, ww, 2) || valid.shape() != (wh, ww, 1) {
            return Err(Error::Contract(format!(
                "transfer expects weak-view labels of size {wh}x{ww}"
            )));
        }
        let (h, w) = self.strong.output_size();
        let mut out_f = Raster::new(h, w, 2);
        let mut out_v = Raster::new(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = self.strong.to_resized(y, x);
                let (wy, wx) = self
                    .weak
                    .from_resized(ry, rx)
                    .expect("containment checked at construction");
                let mut u = field.get(wy, wx, 0);
                if self.weak.flip {
                    u = -u;
                }
                if self.strong.flip {
                    u = -u;
                }
                out_f.set(y, x, 0, u);
                out_f.set(y, x, 1, field.get(wy, wx, 1));
                out_v.set(y, x, 0, valid.get(wy, wx, 0));
            }
        }
        Ok((out_f, out_v))
    }
}
