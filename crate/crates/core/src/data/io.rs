//! On-disk dataset format.
//!
//! ```text
//! <root>/<split>/<id>/target.png   RGB8
//!                     source.png   RGB8
//!                     seg.png      L8 class indices (optional)
//!                     corr.bin     dense field, 2 channels (optional)
//!                     valid.bin    dense field, 1 channel, values in {0, 1} (optional)
//!                     meta.txt     `mode = stereo|flow`
//! ```
//!
//! Field files: `TWNS` | u32 version (1) | u32 H | u32 W | u32 channels |
//! row-major f32 payload, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ImageCollection, Mode, Raster};
use crate::error::{Error, Result};

pub const FIELD_MAGIC: &[u8; 4] = b"TWNS";
pub const FIELD_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_field(field: &Raster<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + field.data.len() * 4);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.height as u32).to_le_bytes());
    out.extend_from_slice(&(field.width as u32).to_le_bytes());
    out.extend_from_slice(&(field.channels as u32).to_le_bytes());
    for v in &field.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<Raster<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FIELD_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let expected = HEADER_LEN + h * w * c * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Raster::from_vec(h, w, c, data))
}

pub fn write_field(field: &Raster<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<Raster<f32>> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}

fn write_rgb(img: &Raster<f32>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_rgb(path: &Path) -> Result<Raster<f32>> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Raster::from_vec(h as usize, w as usize, 3, data))
}

fn write_gray(map: &Raster<u8>, path: &Path) -> Result<()> {
    image::save_buffer(path, &map.data, map.width as u32, map.height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_gray(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(h as usize, w as usize, 1, img.into_raw()))
}

pub fn write_collection(c: &ImageCollection, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb(&c.target, &dir.join("target.png"))?;
    write_rgb(&c.source, &dir.join("source.png"))?;
    if let Some(s) = &c.segmentation {
        write_gray(s, &dir.join("seg.png"))?;
    }
    if let Some(f) = &c.correspondence {
        write_field(f, &dir.join("corr.bin"))?;
    }
    if let Some(v) = &c.valid {
        write_field(v, &dir.join("valid.bin"))?;
    }
    let meta = dir.join("meta.txt");
    fs::write(&meta, format!("mode = {}\n", c.mode)).map_err(|e| Error::io(&meta, e))
}

fn read_mode(dir: &Path) -> Result<Mode> {
    let meta = dir.join("meta.txt");
    if !meta.exists() {
        return Ok(Mode::Stereo);
    }
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "mode" {
                return v.trim().parse();
            }
        }
    }
    Err(Error::format(&meta, "no `mode` entry"))
}

pub fn read_collection(dir: &Path) -> Result<ImageCollection> {
    let mode = read_mode(dir)?;
    let target = read_rgb(&dir.join("target.png"))?;
    let source = read_rgb(&dir.join("source.png"))?;
    let (h, w) = (target.height, target.width);
    let dims_check = |path: PathBuf, r: (usize, usize, usize), ch: usize| -> Result<()> {
        if r != (h, w, ch) {
            return Err(Error::format(
                path,
                format!("dimensions {r:?} do not match target ({h}, {w}, {ch})"),
            ));
        }
        Ok(())
    };
    dims_check(dir.join("source.png"), source.shape(), 3)?;
    let seg_path = dir.join("seg.png");
    let segmentation = if seg_path.exists() {
        let s = read_gray(&seg_path)?;
        dims_check(seg_path, s.shape(), 1)?;
        Some(s)
    } else {
        None
    };
    let corr_path = dir.join("corr.bin");
    let correspondence = if corr_path.exists() {
        let f = read_field(&corr_path)?;
        dims_check(corr_path, f.shape(), 2)?;
        Some(f)
    } else {
        None
    };
    let valid_path = dir.join("valid.bin");
    let valid = if valid_path.exists() {
        let f = read_field(&valid_path)?;
        dims_check(valid_path.clone(), f.shape(), 1)?;
        if f.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(valid_path, "validity values must be 0.0 or 1.0"));
        }
        Some(f)
    } else {
        None
    };
    Ok(ImageCollection {
        mode,
        target,
        source,
        correspondence,
        valid,
        segmentation,
    })
}

/// Collection directories of a split, sorted by name.
pub fn list_split(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<ImageCollection>> {
    list_split(root, split)?
        .iter()
        .map(|p| read_collection(p))
        .collect()
}

pub fn write_split(root: &Path, split: &str, items: &[ImageCollection]) -> Result<()> {
    for (i, c) in items.iter().enumerate() {
        write_collection(c, &root.join(split).join(format!("{i:06}")))?;
    }
    Ok(())
}
