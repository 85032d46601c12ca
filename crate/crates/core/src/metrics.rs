//! Segmentation (mIoU, mean F1) and correspondence (EPE, D1) metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::raster::Raster;
use crate::error::{Error, Result};

/// Confusion counts accumulated over any number of label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegAccumulator {
    num_classes: usize,
    /// Row = ground truth, column = prediction.
    confusion: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub mfsc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    /// No ground-truth class was present.
    pub empty: bool,
}

impl SegAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= c || g as usize >= c {
                return Err(Error::Data(format!("label {} is out of range for {c} classes", p.max(g))));
            }
            self.confusion[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> SegMetrics {
        let c = self.num_classes;
        let mut iou = vec![None; c];
        let mut f1 = vec![None; c];
        for k in 0..c {
            let tp = self.confusion[k * c + k];
            let gt_total: u64 = (0..c).map(|p| self.confusion[k * c + p]).sum();
            if gt_total == 0 {
                continue;
            }
            let pred_total: u64 = (0..c).map(|g| self.confusion[g * c + k]).sum();
            let fn_ = gt_total - tp;
            let fp = pred_total - tp;
            iou[k] = Some(100.0 * tp as f64 / (tp + fp + fn_) as f64);
            f1[k] = Some(100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        SegMetrics {
            miou: mean(&iou),
            mfsc: mean(&f1),
            empty: iou.iter().all(Option::is_none),
            per_class_iou: iou,
            per_class_f1: f1,
        }
    }
}

pub fn seg_metrics(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<SegMetrics> {
    let mut acc = SegAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrAccumulator {
    error_sum: f64,
    outliers: u64,
    count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrMetrics {
    pub epe: f64,
    /// Percentage of pixels with error above 3 px and above 5% of |gt|.
    pub d1: f64,
    pub count: u64,
    pub empty: bool,
}

pub fn is_outlier(error: f64, gt_norm: f64) -> bool {
    error > 3.0 && error > 0.05 * gt_norm
}

impl CorrAccumulator {
    pub fn add_pixel(&mut self, pred: [f64; 2], gt: [f64; 2]) {
        let err = (pred[0] - gt[0]).hypot(pred[1] - gt[1]);
        let norm = gt[0].hypot(gt[1]);
        self.error_sum += err;
        self.outliers += is_outlier(err, norm) as u64;
        self.count += 1;
    }

    /// `pred` and `gt` are `H x W x 2`; `valid` is `H x W x 1` with 0/1 values.
    pub fn add(&mut self, pred: &Raster<f32>, gt: &Raster<f32>, valid: Option<&Raster<f32>>) -> Result<()> {
        if pred.shape() != gt.shape() || pred.channels != 2 {
            return Err(Error::Contract(format!(
                "correspondence shapes {:?} and {:?} do not match",
                pred.shape(),
                gt.shape()
            )));
        }
        if let Some(v) = valid {
            if (v.height, v.width) != (gt.height, gt.width) {
                return Err(Error::Contract("validity mask does not match the field".into()));
            }
        }
        for y in 0..gt.height {
            for x in 0..gt.width {
                if valid.is_some_and(|v| v.get(y, x, 0) == 0.0) {
                    continue;
                }
                self.add_pixel(
                    [pred.get(y, x, 0) as f64, pred.get(y, x, 1) as f64],
                    [gt.get(y, x, 0) as f64, gt.get(y, x, 1) as f64],
                );
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> CorrMetrics {
        if self.count == 0 {
            return CorrMetrics {
                epe: 0.0,
                d1: 0.0,
                count: 0,
                empty: true,
            };
        }
        CorrMetrics {
            epe: self.error_sum / self.count as f64,
            d1: 100.0 * self.outliers as f64 / self.count as f64,
            count: self.count,
            empty: false,
        }
    }
}

pub fn corr_metrics(pred: &Raster<f32>, gt: &Raster<f32>, valid: Option<&Raster<f32>>) -> Result<CorrMetrics> {
    let mut acc = CorrAccumulator::default();
    acc.add(pred, gt, valid)?;
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub mfsc: f64,
    pub epe: f64,
    pub d1: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_count: u64,
    pub seg_empty: bool,
    pub corr_empty: bool,
}

impl MetricReport {
    pub fn new(seg: &SegMetrics, corr: &CorrMetrics) -> Self {
        Self {
            miou: seg.miou,
            mfsc: seg.mfsc,
            epe: corr.epe,
            d1: corr.d1,
            per_class_iou: seg.per_class_iou.clone(),
            pixel_count: corr.count,
            seg_empty: seg.empty,
            corr_empty: corr.empty,
        }
    }

    /// One `key=value` line per metric followed by a per-class block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou={:.6}", self.miou);
        let _ = writeln!(s, "mfsc={:.6}", self.mfsc);
        let _ = writeln!(s, "epe={:.6}", self.epe);
        let _ = writeln!(s, "d1={:.6}", self.d1);
        let _ = writeln!(s, "pixel_count={}", self.pixel_count);
        let _ = writeln!(s, "seg_empty={}", self.seg_empty);
        let _ = writeln!(s, "corr_empty={}", self.corr_empty);
        let _ = writeln!(s, "[per_class]");
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "iou.{c}={v:.6}");
                }
                None => {
                    let _ = writeln!(s, "iou.{c}=absent");
                }
            }
        }
        s
    }

    /// Parses the `key=value` lines of [`MetricReport::to_text`] into a map.
    pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            out.insert(k.to_string(), v.to_string());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 2]) -> Raster<f32> {
        let mut r = Raster::filled(h, w, 2, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                r.set(y, x, 0, v[0]);
                r.set(y, x, 1, v[1]);
            }
        }
        r
    }

    #[test]
    fn perfect_segmentation() {
        let gt = vec![0, 1, 1, 2, 0, 2];
        let m = seg_metrics(&gt, &gt, 3).unwrap();
        assert_eq!(m.miou, 100.0);
        assert_eq!(m.mfsc, 100.0);
    }

    #[test]
    fn complement_segmentation() {
        let gt = vec![0, 1, 1, 0];
        let pred: Vec<u32> = gt.iter().map(|&c| 1 - c).collect();
        let m = seg_metrics(&pred, &gt, 2).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = seg_metrics(&[0, 0, 2, 2], &[0, 0, 0, 0], 3).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(50.0), None, None]);
        assert_eq!(m.miou, 50.0);
        let e = seg_metrics(&[], &[], 3).unwrap();
        assert!(e.empty && e.miou == 0.0);
    }

    #[test]
    fn d1_boundaries() {
        let gt = field(2, 2, |_, _| [100.0, 0.0]);
        let pred = field(2, 2, |_, _| [97.0, 0.0]);
        let m = corr_metrics(&pred, &gt, None).unwrap();
        assert_eq!((m.epe, m.d1), (3.0, 0.0));
        let gt = field(2, 2, |_, _| [0.0, 10.0]);
        let pred = field(2, 2, |_, _| [0.0, 14.0]);
        let m = corr_metrics(&pred, &gt, None).unwrap();
        assert_eq!((m.epe, m.d1), (4.0, 100.0));
        let m = corr_metrics(&gt, &gt, None).unwrap();
        assert_eq!((m.epe, m.d1), (0.0, 0.0));
    }

    #[test]
    fn empty_valid_mask_flags() {
        let gt = field(2, 2, |_, _| [1.0, 0.0]);
        let valid = Raster::filled(2, 2, 1, 0.0);
        let m = corr_metrics(&gt, &gt, Some(&valid)).unwrap();
        assert!(m.empty && m.epe == 0.0 && m.d1 == 0.0);
    }

    #[test]
    fn report_text_round_trip() {
        let seg = seg_metrics(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        let corr = CorrMetrics { epe: 1.25, d1: 5.0, count: 3, empty: false };
        let r = MetricReport::new(&seg, &corr);
        let kv = MetricReport::parse_text(&r.to_text()).unwrap();
        assert_eq!(kv["epe"], "1.250000");
        assert_eq!(kv["iou.2"], "absent");
        assert_eq!(kv["pixel_count"], "3");
    }
}
