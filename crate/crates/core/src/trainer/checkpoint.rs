//! Single-file, versioned checkpoints: student and teacher weights, optimizer
//! moments, counters and the configuration text, stored as safetensors.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "twins-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything persisted between runs, independent of live model objects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub student: BTreeMap<String, Tensor>,
    pub teacher: BTreeMap<String, Tensor>,
    /// `m.<name>` / `v.<name>` moment estimates.
    pub optimizer: BTreeMap<String, Tensor>,
    pub optimizer_step: u64,
    pub step: u64,
    pub skipped_batches: u64,
    /// Free-form entries (configuration text, phase index, ...).
    pub metadata: BTreeMap<String, String>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Raw { dtype, shape, bytes })
}

fn from_view(name: &str, dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let dev = Device::Cpu;
    let t = match dtype {
        Dtype::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raws = BTreeMap::new();
        for (prefix, map) in [("student", &self.student), ("teacher", &self.teacher), ("optim", &self.optimizer)] {
            for (k, t) in map {
                raws.insert(format!("{prefix}/{k}"), to_raw(t)?);
            }
        }
        let mut info: HashMap<String, String> = self
            .metadata
            .iter()
            .map(|(k, v)| (format!("meta.{k}"), v.clone()))
            .collect();
        info.insert("format".into(), CHECKPOINT_FORMAT.into());
        info.insert("version".into(), CHECKPOINT_VERSION.to_string());
        info.insert("step".into(), self.step.to_string());
        info.insert("optimizer_step".into(), self.optimizer_step.to_string());
        info.insert("skipped_batches".into(), self.skipped_batches.to_string());
        safetensors::serialize(raws.iter().map(|(k, v)| (k.clone(), v)), Some(info))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let info = header.metadata().clone().unwrap_or_default();
        if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("not a checkpoint written by this tool".into()));
        }
        let version: u32 = parse_num(&info, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut ck = Checkpoint {
            student: BTreeMap::new(),
            teacher: BTreeMap::new(),
            optimizer: BTreeMap::new(),
            optimizer_step: parse_num(&info, "optimizer_step")?,
            step: parse_num(&info, "step")?,
            skipped_batches: parse_num(&info, "skipped_batches")?,
            metadata: info
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        };
        for (name, view) in st.tensors() {
            let t = from_view(&name, view.dtype(), view.shape(), view.data())?;
            let (prefix, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry `{name}`")))?;
            let slot = match prefix {
                "student" => &mut ck.student,
                "teacher" => &mut ck.teacher,
                "optim" => &mut ck.optimizer,
                _ => return Err(Error::Checkpoint(format!("unexpected entry `{name}`"))),
            };
            slot.insert(key.to_string(), t);
        }
        if ck.student.is_empty() {
            return Err(Error::Checkpoint("checkpoint holds no student weights".into()));
        }
        Ok(ck)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_num<T: std::str::FromStr>(info: &HashMap<String, String>, key: &str) -> Result<T> {
    info.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or malformed `{key}` entry")))
}
