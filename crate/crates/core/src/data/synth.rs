//! Layered-plane scene synthesis with exact dense ground truth.
//!
//! A scene is a stack of fronto-parallel textured planes: a background plane
//! covering the whole view plus `num_objects` rectangles or ellipses at nearer
//! depths. Each plane moves by a single integer displacement between the two
//! views, so `source(p + d) == target(p)` holds exactly wherever the plane is
//! visible in both views. Every plane carries one semantic class, which ties
//! segmentation boundaries to depth discontinuities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ImageCollection, Mode, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_objects: usize,
    /// `(near, far)`; the background sits at `far`.
    pub depth_range: (f32, f32),
    pub texture_seed: u64,
    /// `(H, W)`, both multiples of 32.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Displacement magnitude (pixels) of a plane at the near depth.
    pub max_displacement: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 3,
            depth_range: (1.0, 4.0),
            texture_seed: 0,
            image_size: (96, 128),
            num_classes: 4,
            max_displacement: 16.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be a positive multiple of 32 in both dimensions"
            )));
        }
        if self.num_objects < 1 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in [2, 255], got {}",
                self.num_classes
            )));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && near <= far && far.is_finite()) {
            return Err(Error::Config(format!(
                "depth range ({near}, {far}) must satisfy 0 < near <= far"
            )));
        }
        if !(self.max_displacement >= 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::Config("max_displacement must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Same spec with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            texture_seed: seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Full,
    Rect { cy: f32, cx: f32, hy: f32, hx: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Full => true,
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

struct Layer {
    shape: Shape,
    class: u8,
    /// Integer displacement `(dx, dy)` from target to source.
    shift: (i32, i32),
    /// `(H + 2m) x (W + 2m) x 3` texture in target coordinates offset by `m`.
    texture: Raster<f32>,
}

/// Class tints; class identity is recoverable from colour statistics.
const PALETTE: [[f32; 3]; 8] = [
    [0.55, 0.55, 0.55],
    [0.95, 0.35, 0.30],
    [0.30, 0.80, 0.35],
    [0.30, 0.45, 0.95],
    [0.95, 0.85, 0.30],
    [0.80, 0.35, 0.90],
    [0.30, 0.90, 0.90],
    [0.95, 0.60, 0.25],
];

fn tint(class: u8) -> [f32; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Band-limited noise with zero mean and unit standard deviation.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let white: Vec<f32> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut n = gaussian_blur(&white, h, w, sigma);
    let mean = n.iter().sum::<f32>() / n.len() as f32;
    let var = n.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n.len() as f32;
    let std = var.sqrt().max(1e-6);
    for v in &mut n {
        *v = (*v - mean) / std;
    }
    n
}

fn make_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, class: u8) -> Raster<f32> {
    let fine = smooth_noise(rng, h, w, 1.0);
    let coarse = smooth_noise(rng, h, w, 4.0);
    let chroma = smooth_noise(rng, h, w, 2.0);
    let t = tint(class);
    let brightness: f32 = rng.random_range(0.8..1.2);
    let mut out = Raster::new(h, w, 3);
    for i in 0..h * w {
        let lum = (0.55 + 0.2 * fine[i] + 0.1 * coarse[i]) * brightness;
        for c in 0..3 {
            let v = t[c] * lum + 0.05 * chroma[i] * (c as f32 - 1.0);
            out.data[i * 3 + c] = quantize(v);
        }
    }
    out
}

/// 8-bit quantisation so PNG storage is lossless.
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one scene. Deterministic in `spec.texture_seed`.
pub fn generate_scene(spec: &SceneSpec, mode: Mode) -> Result<ImageCollection> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let (near, far) = spec.depth_range;
    let margin = spec.max_displacement.ceil() as usize * 2 + 2;
    let (th, tw) = (h + 2 * margin, w + 2 * margin);

    let heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let displacement = |rng: &mut ChaCha8Rng, depth: f32| -> (i32, i32) {
        let mag = spec.max_displacement * near / depth;
        match mode {
            Mode::Stereo => (mag.round() as i32, 0),
            Mode::Flow => {
                let jitter = 0.25 * spec.max_displacement;
                let jx: f32 = rng.random_range(-1.0..=1.0) * jitter;
                let jy: f32 = rng.random_range(-1.0..=1.0) * jitter;
                let limit = spec.max_displacement * 1.25;
                let dx = (mag * heading.cos() + jx).clamp(-limit, limit);
                let dy = (mag * heading.sin() + jy).clamp(-limit, limit);
                (dx.round() as i32, dy.round() as i32)
            }
        }
    };

    let mut layers = Vec::with_capacity(spec.num_objects + 1);
    let mut depths = Vec::with_capacity(spec.num_objects + 1);
    let bg_shift = displacement(&mut rng, far);
    layers.push(Layer {
        shape: Shape::Full,
        class: 0,
        shift: bg_shift,
        texture: make_texture(&mut rng, th, tw, 0),
    });
    depths.push(far);
    for _ in 0..spec.num_objects {
        let depth = if far > near {
            rng.random_range(near..far)
        } else {
            near
        };
        let class = rng.random_range(1..spec.num_classes) as u8;
        let cy = rng.random_range(0.1..0.9) * h as f32;
        let cx = rng.random_range(0.1..0.9) * w as f32;
        let sy = rng.random_range(0.12..0.3) * h as f32;
        let sx = rng.random_range(0.12..0.3) * w as f32;
        let shape = if rng.random_bool(0.5) {
            Shape::Rect { cy, cx, hy: sy, hx: sx }
        } else {
            Shape::Ellipse { cy, cx, ry: sy, rx: sx }
        };
        let shift = displacement(&mut rng, depth);
        let texture = make_texture(&mut rng, th, tw, class);
        layers.push(Layer {
            shape,
            class,
            shift,
            texture,
        });
        depths.push(depth);
    }

    // Front-most first; on equal depth the later layer is in front.
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]).then(b.cmp(&a)));

    let top_in_target = |y: usize, x: usize| -> usize {
        *order
            .iter()
            .find(|&&l| layers[l].shape.contains(y as f32, x as f32))
            .expect("background covers every pixel")
    };
    let top_in_source = |y: usize, x: usize| -> usize {
        *order
            .iter()
            .find(|&&l| {
                let (dx, dy) = layers[l].shift;
                layers[l]
                    .shape
                    .contains(y as f32 - dy as f32, x as f32 - dx as f32)
            })
            .expect("background covers every pixel")
    };
    let texel = |l: usize, ty: i64, tx: i64, c: usize| -> f32 {
        let yy = (ty + margin as i64) as usize;
        let xx = (tx + margin as i64) as usize;
        layers[l].texture.get(yy, xx, c)
    };

    let mut target = Raster::new(h, w, 3);
    let mut source = Raster::new(h, w, 3);
    let mut corr = Raster::new(h, w, 2);
    let mut valid = Raster::new(h, w, 1);
    let mut seg = Raster::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let l = top_in_target(y, x);
            for c in 0..3 {
                target.set(y, x, c, texel(l, y as i64, x as i64, c));
            }
            let (dx, dy) = layers[l].shift;
            corr.set(y, x, 0, dx as f32);
            corr.set(y, x, 1, dy as f32);
            seg.set(y, x, 0, layers[l].class);
            let qy = y as i64 + dy as i64;
            let qx = x as i64 + dx as i64;
            let inside = qy >= 0 && qx >= 0 && (qy as usize) < h && (qx as usize) < w;
            let visible = inside && top_in_source(qy as usize, qx as usize) == l;
            valid.set(y, x, 0, if visible { 1.0 } else { 0.0 });

            let ls = top_in_source(y, x);
            let (sdx, sdy) = layers[ls].shift;
            for c in 0..3 {
                source.set(y, x, c, texel(ls, y as i64 - sdy as i64, x as i64 - sdx as i64, c));
            }
        }
    }

    Ok(ImageCollection {
        mode,
        target,
        source,
        correspondence: Some(corr),
        valid: Some(valid),
        segmentation: Some(seg),
    })
}

/// Generates `count` scenes with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_many(spec: &SceneSpec, mode: Mode, base_seed: u64, count: usize) -> Result<Vec<ImageCollection>> {
    (0..count)
        .map(|i| generate_scene(&spec.with_seed(base_seed + i as u64), mode))
        .collect()
}
