//! Image collections: synthetic generation, on-disk format, augmentation and
//! conversion to model tensors.

pub mod augment;
pub mod batch;
pub mod io;
pub mod raster;
pub mod synth;

pub use batch::Batch;
pub use raster::Raster;
pub use synth::{generate_scene, SceneSpec};

use crate::error::{Error, Result};

/// Which geometric task a collection belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Horizontal disparity; the second correspondence component is always zero.
    Stereo,
    /// Dense 2-D motion between consecutive frames.
    Flow,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Stereo => "stereo",
            Mode::Flow => "flow",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo" => Ok(Mode::Stereo),
            "flow" => Ok(Mode::Flow),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected stereo|flow)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A target/source image pair with optional dense labels.
///
/// Correspondences are stored in pixels: target pixel `p` matches source
/// position `p + correspondence(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCollection {
    pub mode: Mode,
    /// `H x W x 3`, values in `[0, 1]`.
    pub target: Raster<f32>,
    pub source: Raster<f32>,
    /// `H x W x 2`.
    pub correspondence: Option<Raster<f32>>,
    /// `H x W x 1`, 1.0 where the correspondence is visible in both views.
    pub valid: Option<Raster<f32>>,
    /// `H x W x 1` class indices.
    pub segmentation: Option<Raster<u8>>,
}

impl ImageCollection {
    pub fn height(&self) -> usize {
        self.target.height
    }

    pub fn width(&self) -> usize {
        self.target.width
    }

    /// Checks the structural invariants of the collection.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let check = |name: &str, r: (usize, usize, usize), ch: usize| -> Result<()> {
            if r != (h, w, ch) {
                return Err(Error::Contract(format!(
                    "{name} has shape {r:?}, expected ({h}, {w}, {ch})"
                )));
            }
            Ok(())
        };
        check("target", self.target.shape(), 3)?;
        check("source", self.source.shape(), 3)?;
        if let Some(c) = &self.correspondence {
            check("correspondence", c.shape(), 2)?;
            if self.mode == Mode::Stereo && c.data.chunks(2).any(|p| p[1] != 0.0) {
                return Err(Error::Contract(
                    "stereo correspondence with non-zero vertical component".into(),
                ));
            }
            if c.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite correspondence".into()));
            }
        }
        if let Some(v) = &self.valid {
            check("valid", v.shape(), 1)?;
        }
        if let Some(s) = &self.segmentation {
            check("segmentation", s.shape(), 1)?;
            if let Some(n) = num_classes {
                if let Some(bad) = s.data.iter().find(|&&c| c as usize >= n) {
                    return Err(Error::Data(format!(
                        "class index {bad} outside [0, {n})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy without correspondence labels (the seg-only regime).
    pub fn without_correspondence(&self) -> Self {
        Self {
            correspondence: None,
            valid: None,
            ..self.clone()
        }
    }
}
