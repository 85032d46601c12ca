/// Row-major `height x width x channels` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Panics if `data` has the wrong length.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width * channels, "raster size mismatch");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Integer-aligned window copy; panics when the window leaves the raster.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut out = Self::new(h, w, self.channels);
        for y in 0..h {
            let src = self.idx(y0 + y, x0, 0);
            let dst = out.idx(y, 0, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let mut out = Self::new(h, w, self.channels);
        for y in 0..h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / h as f64).floor() as usize).min(self.height - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / w as f64).floor() as usize).min(self.width - 1);
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }
}

impl Raster<f32> {
    /// Bilinear sample at a continuous position, clamping to the border.
    pub fn sample_bilinear(&self, y: f32, x: f32, c: usize) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        let mut out = Self::new(h, w, self.channels);
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        for y in 0..h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(fy, fx, c));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_flip() {
        let r = Raster::from_vec(2, 3, 1, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(r.crop(1, 1, 1, 2).data, vec![5, 6]);
        assert_eq!(r.flip_horizontal().data, vec![3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn bilinear_at_integer_positions_is_exact() {
        let r = Raster::from_vec(2, 2, 1, vec![0.25f32, 0.5, 0.75, 1.0]);
        assert_eq!(r.sample_bilinear(1.0, 0.0, 0), 0.75);
        assert_eq!(r.sample_bilinear(0.5, 0.5, 0), 0.625);
    }
}
