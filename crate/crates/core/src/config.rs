//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # two-phase schedule
//! seed = 7
//! model.preset = compact
//! phase.1.mode = supervised
//! phase.1.split = dense
//! phase.1.steps = 2000
//! phase.2.mode = semi
//! phase.2.split = segonly
//! phase.2.steps = 500
//! phase.2.lr = 0.0002
//! ```
//!
//! `model.preset` is applied before every other model key, whatever its
//! position in the file. Phases are numbered from 1 without gaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::correlation::CorrFeatureSource;
use crate::cta::FuseMode;
use crate::data::{Mode, SceneSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refinement::ContextSource;
use crate::trainer::{pseudo::check_alpha, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMode {
    Supervised,
    Semi,
}

impl FromStr for PhaseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "semi" => Ok(Self::Semi),
            _ => Err(format!("expected supervised|semi, got `{s}`")),
        }
    }
}

impl PhaseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::Semi => "semi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Compact,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalWeights {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the phase learning rate to `lr_floor` times it.
    Linear,
}

/// Per-phase settings; `None` falls back to the plan-wide value.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub mode: PhaseMode,
    pub split: String,
    pub steps: u64,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub batch_size: Option<usize>,
    pub ema_momentum: Option<f64>,
}

impl Phase {
    /// Training settings for this phase.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut t = base.clone();
        if let Some(lr) = self.lr {
            t.optimizer.lr = lr;
        }
        if let Some(a) = self.alpha {
            t.alpha = a;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(m) = self.ema_momentum {
            t.ema_momentum = m;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    pub preset: ModelPreset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: LrSchedule,
    pub lr_floor: f64,
    pub phases: Vec<Phase>,
    /// Split evaluated after every phase; empty disables evaluation.
    pub eval_split: String,
    pub eval_weights: EvalWeights,
    /// Intermediate checkpoint interval in steps; 0 keeps only phase checkpoints.
    pub checkpoint_every: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data_root: None,
            preset: ModelPreset::Compact,
            model: ModelConfig::compact(),
            train: TrainConfig::default(),
            schedule: LrSchedule::Linear,
            lr_floor: 0.05,
            phases: Vec::new(),
            eval_split: "test".into(),
            eval_weights: EvalWeights::Student,
            checkpoint_every: 0,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("the plan declares no phases".into()));
        }
        if self.phases[0].mode == PhaseMode::Semi {
            return Err(Error::Config(
                "phase 1 is semi-supervised, but a supervised phase must come first to train the teacher".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        for (i, p) in self.phases.iter().enumerate() {
            let t = p.train_config(&self.train);
            t.validate()
                .map_err(|e| Error::Config(format!("phase {}: {e}", i + 1)))?;
            if p.split.is_empty() {
                return Err(Error::Config(format!("phase {} has an empty split", i + 1)));
            }
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::Config(format!("train.lr_floor = {} is outside [0, 1]", self.lr_floor)));
        }
        Ok(())
    }

    /// Learning rate at `step` of a phase lasting `steps`.
    pub fn lr_at(&self, base: f64, step: u64, steps: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Linear => {
                let frac = 1.0 - step as f64 / steps.max(1) as f64;
                base * frac.max(self.lr_floor)
            }
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_size(v: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = v.split_once('x').ok_or_else(|| format!("expected HxW, got `{v}`"))?;
    Ok((parse_value(h.trim())?, parse_value(w.trim())?))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| parse_value(x.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "mode" => m.mode = Mode::from_str(v).map_err(|e| e.to_string())?,
        "model.channels" => {
            let c: Vec<usize> = parse_list(v)?;
            m.backbone.channels = c
                .try_into()
                .map_err(|_| "expected four comma-separated channel counts".to_string())?;
        }
        "model.groups" => m.backbone.groups = parse_value(v)?,
        "corr.radius" => m.corr.radius = parse_value(v)?,
        "corr.levels" => m.corr.levels = parse_value(v)?,
        "corr.features" => {
            m.corr.features = match v {
                "stage" => CorrFeatureSource::Stage,
                "early" => CorrFeatureSource::Early,
                _ => return Err(format!("expected stage|early, got `{v}`")),
            }
        }
        "refine.iters" => m.refine.iters = parse_value(v)?,
        "refine.hidden" => m.refine.hidden_width = parse_value(v)?,
        "refine.gamma" => m.refine.gamma = parse_value(v)?,
        "refine.context" => {
            m.refine.context = match v {
                "shared" => ContextSource::Shared,
                "independent" => ContextSource::Independent,
                _ => return Err(format!("expected shared|independent, got `{v}`")),
            }
        }
        "cta.mode" => {
            m.cta.mode = match v {
                "attention" => FuseMode::LinearAttention,
                "identity" => FuseMode::Identity,
                "add" => FuseMode::Add,
                _ => return Err(format!("expected attention|identity|add, got `{v}`")),
            }
        }
        "cta.heads" => m.cta.heads = parse_value(v)?,
        "cta.eps" => m.cta.eps = parse_value(v)?,
        "cta.residual" => m.cta.residual = parse_bool(v)?,
        "decoder.classes" => m.decoder.num_classes = parse_value(v)?,
        "decoder.queries" => m.decoder.num_queries = parse_value(v)?,
        "decoder.dim" => m.decoder.dim = parse_value(v)?,
        "decoder.no_object_weight" => m.decoder.no_object_weight = parse_value(v)?,
        "unc.bins" => m.unc.bins = parse_value(v)?,
        "unc.lambda_kl" => m.unc.lambda_kl = parse_value(v)?,
        "unc.logsig_clamp" => m.unc.logsig_clamp = parse_value(v)?,
        "unc.bandwidth" => m.unc.bandwidth = parse_value(v)?,
        "unc.hidden" => m.unc.hidden = parse_value(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_plan(p: &mut ExperimentPlan, key: &str, v: &str) -> std::result::Result<bool, String> {
    let t = &mut p.train;
    match key {
        "seed" => p.seed = parse_value(v)?,
        "output_dir" => p.output_dir = PathBuf::from(v),
        "data_root" => p.data_root = Some(PathBuf::from(v)),
        "alpha" => t.alpha = parse_value(v)?,
        "train.lr" => t.optimizer.lr = parse_value(v)?,
        "train.beta1" => t.optimizer.beta1 = parse_value(v)?,
        "train.beta2" => t.optimizer.beta2 = parse_value(v)?,
        "train.eps" => t.optimizer.eps = parse_value(v)?,
        "train.weight_decay" => t.optimizer.weight_decay = parse_value(v)?,
        "train.grad_clip" => t.grad_clip = parse_value(v)?,
        "train.ema_momentum" => t.ema_momentum = parse_value(v)?,
        "train.batch_size" => t.batch_size = parse_value(v)?,
        "train.seg_weight" => t.seg_weight = parse_value(v)?,
        "train.corr_weight" => t.corr_weight = parse_value(v)?,
        "train.augment" => t.augment = parse_bool(v)?,
        "train.weak_crop" => t.weak_crop = parse_size(v)?,
        "train.strong_crop" => t.strong_crop = parse_size(v)?,
        "train.scales" => t.scales = parse_list(v)?,
        "train.lr_schedule" => {
            p.schedule = match v {
                "constant" => LrSchedule::Constant,
                "linear" => LrSchedule::Linear,
                _ => return Err(format!("expected constant|linear, got `{v}`")),
            }
        }
        "train.lr_floor" => p.lr_floor = parse_value(v)?,
        "aug.brightness" => t.photometric.brightness = parse_value(v)?,
        "aug.contrast" => t.photometric.contrast = parse_value(v)?,
        "aug.saturation" => t.photometric.saturation = parse_value(v)?,
        "aug.gamma" => t.photometric.gamma = parse_value(v)?,
        "aug.occlusion_prob" => t.photometric.occlusion_prob = parse_value(v)?,
        "eval.split" => p.eval_split = v.to_string(),
        "eval.weights" => {
            p.eval_weights = match v {
                "student" => EvalWeights::Student,
                "teacher" => EvalWeights::Teacher,
                _ => return Err(format!("expected student|teacher, got `{v}`")),
            }
        }
        "checkpoint.every" => p.checkpoint_every = parse_value(v)?,
        _ => return set_model(&mut p.model, key, v),
    }
    Ok(true)
}

#[derive(Default)]
struct PhaseDraft {
    mode: Option<PhaseMode>,
    split: Option<String>,
    steps: Option<u64>,
    lr: Option<f64>,
    alpha: Option<f64>,
    batch_size: Option<usize>,
    ema_momentum: Option<f64>,
}

fn set_phase(d: &mut PhaseDraft, field: &str, v: &str) -> std::result::Result<bool, String> {
    match field {
        "mode" => d.mode = Some(v.parse()?),
        "split" => d.split = Some(v.to_string()),
        "steps" => d.steps = Some(parse_value(v)?),
        "lr" => d.lr = Some(parse_value(v)?),
        "alpha" => d.alpha = Some(parse_value(v)?),
        "batch_size" => d.batch_size = Some(parse_value(v)?),
        "ema_momentum" => d.ema_momentum = Some(parse_value(v)?),
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses and validates a plan.
pub fn parse_config(text: &str) -> Result<ExperimentPlan> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some(prev) = seen.insert(k.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key `{k}` (first set on line {prev})"),
            });
        }
        entries.push((line_no, k, v));
    }

    let mut plan = ExperimentPlan::default();
    if let Some((line, _, v)) = entries.iter().find(|(_, k, _)| k == "model.preset") {
        (plan.preset, plan.model) = match v.as_str() {
            "compact" => (ModelPreset::Compact, ModelConfig::compact()),
            "full" => (ModelPreset::Full, ModelConfig::default()),
            _ => {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("model.preset: expected compact|full, got `{v}`"),
                })
            }
        };
    }

    let mut drafts: BTreeMap<usize, PhaseDraft> = BTreeMap::new();
    for (line, k, v) in &entries {
        let err = |msg: String| Error::Parse { line: *line, msg: format!("{k}: {msg}") };
        if k == "model.preset" {
            continue;
        }
        let known = if let Some(rest) = k.strip_prefix("phase.") {
            let (idx, field) = rest.split_once('.').ok_or_else(|| err("expected phase.N.field".into()))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("bad phase index `{idx}`")))?;
            if idx == 0 {
                return Err(err("phases are numbered from 1".into()));
            }
            set_phase(drafts.entry(idx).or_default(), field, v).map_err(err)?
        } else {
            set_plan(&mut plan, k, v).map_err(err)?
        };
        if !known {
            return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}`") });
        }
    }

    for (pos, (idx, d)) in drafts.into_iter().enumerate() {
        if idx != pos + 1 {
            return Err(Error::Config(format!("phase {} is missing (phases must be numbered 1, 2, ...)", pos + 1)));
        }
        let missing = |f: &str| Error::Config(format!("phase.{idx}.{f} is required"));
        plan.phases.push(Phase {
            mode: d.mode.ok_or_else(|| missing("mode"))?,
            split: d.split.ok_or_else(|| missing("split"))?,
            steps: d.steps.ok_or_else(|| missing("steps"))?,
            lr: d.lr,
            alpha: d.alpha,
            batch_size: d.batch_size,
            ema_momentum: d.ema_momentum,
        });
    }
    plan.validate()?;
    for p in &plan.phases {
        if let Some(a) = p.alpha {
            check_alpha(a)?;
        }
    }
    Ok(plan)
}

/// Canonical text listing every key; `parse_config` reads it back to an
/// equal plan.
pub fn serialize_config(p: &ExperimentPlan) -> String {
    let m = &p.model;
    let t = &p.train;
    let o = &t.optimizer;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("seed", p.seed.to_string());
    kv("output_dir", p.output_dir.display().to_string());
    if let Some(d) = &p.data_root {
        kv("data_root", d.display().to_string());
    }
    kv(
        "model.preset",
        match p.preset {
            ModelPreset::Compact => "compact",
            ModelPreset::Full => "full",
        }
        .into(),
    );
    kv("mode", m.mode.to_string());
    kv("model.channels", join(&m.backbone.channels));
    kv("model.groups", m.backbone.groups.to_string());
    kv("corr.radius", m.corr.radius.to_string());
    kv("corr.levels", m.corr.levels.to_string());
    kv(
        "corr.features",
        match m.corr.features {
            CorrFeatureSource::Stage => "stage",
            CorrFeatureSource::Early => "early",
        }
        .into(),
    );
    kv("refine.iters", m.refine.iters.to_string());
    kv("refine.hidden", m.refine.hidden_width.to_string());
    kv("refine.gamma", m.refine.gamma.to_string());
    kv(
        "refine.context",
        match m.refine.context {
            ContextSource::Shared => "shared",
            ContextSource::Independent => "independent",
        }
        .into(),
    );
    kv(
        "cta.mode",
        match m.cta.mode {
            FuseMode::LinearAttention => "attention",
            FuseMode::Identity => "identity",
            FuseMode::Add => "add",
        }
        .into(),
    );
    kv("cta.heads", m.cta.heads.to_string());
    kv("cta.eps", m.cta.eps.to_string());
    kv("cta.residual", m.cta.residual.to_string());
    kv("decoder.classes", m.decoder.num_classes.to_string());
    kv("decoder.queries", m.decoder.num_queries.to_string());
    kv("decoder.dim", m.decoder.dim.to_string());
    kv("decoder.no_object_weight", m.decoder.no_object_weight.to_string());
    kv("unc.bins", m.unc.bins.to_string());
    kv("unc.lambda_kl", m.unc.lambda_kl.to_string());
    kv("unc.logsig_clamp", m.unc.logsig_clamp.to_string());
    kv("unc.bandwidth", m.unc.bandwidth.to_string());
    kv("unc.hidden", m.unc.hidden.to_string());
    kv("alpha", t.alpha.to_string());
    kv("train.lr", o.lr.to_string());
    kv("train.beta1", o.beta1.to_string());
    kv("train.beta2", o.beta2.to_string());
    kv("train.eps", o.eps.to_string());
    kv("train.weight_decay", o.weight_decay.to_string());
    kv("train.grad_clip", t.grad_clip.to_string());
    kv("train.ema_momentum", t.ema_momentum.to_string());
    kv("train.batch_size", t.batch_size.to_string());
    kv("train.seg_weight", t.seg_weight.to_string());
    kv("train.corr_weight", t.corr_weight.to_string());
    kv("train.augment", t.augment.to_string());
    kv("train.weak_crop", format!("{}x{}", t.weak_crop.0, t.weak_crop.1));
    kv("train.strong_crop", format!("{}x{}", t.strong_crop.0, t.strong_crop.1));
    kv("train.scales", join(&t.scales));
    kv(
        "train.lr_schedule",
        match p.schedule {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        }
        .into(),
    );
    kv("train.lr_floor", p.lr_floor.to_string());
    kv("aug.brightness", t.photometric.brightness.to_string());
    kv("aug.contrast", t.photometric.contrast.to_string());
    kv("aug.saturation", t.photometric.saturation.to_string());
    kv("aug.gamma", t.photometric.gamma.to_string());
    kv("aug.occlusion_prob", t.photometric.occlusion_prob.to_string());
    kv("eval.split", p.eval_split.clone());
    kv(
        "eval.weights",
        match p.eval_weights {
            EvalWeights::Student => "student",
            EvalWeights::Teacher => "teacher",
        }
        .into(),
    );
    kv("checkpoint.every", p.checkpoint_every.to_string());
    for (i, ph) in p.phases.iter().enumerate() {
        let n = i + 1;
        kv(&format!("phase.{n}.mode"), ph.mode.as_str().into());
        kv(&format!("phase.{n}.split"), ph.split.clone());
        kv(&format!("phase.{n}.steps"), ph.steps.to_string());
        if let Some(v) = ph.lr {
            kv(&format!("phase.{n}.lr"), v.to_string());
        }
        if let Some(v) = ph.alpha {
            kv(&format!("phase.{n}.alpha"), v.to_string());
        }
        if let Some(v) = ph.batch_size {
            kv(&format!("phase.{n}.batch_size"), v.to_string());
        }
        if let Some(v) = ph.ema_momentum {
            kv(&format!("phase.{n}.ema_momentum"), v.to_string());
        }
    }
    s
}

/// Scene generator settings for `twins gen`, in the same `key = value` form:
/// `mode`, `num_objects`, `depth_near`, `depth_far`, `texture_seed`, `height`,
/// `width`, `num_classes`, `max_displacement`.
pub fn parse_scene_spec(text: &str) -> Result<(SceneSpec, Mode)> {
    let mut spec = SceneSpec::default();
    let mut mode = Mode::Stereo;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let r: std::result::Result<(), String> = (|| {
            match k {
                "mode" => mode = Mode::from_str(v).map_err(|e| e.to_string())?,
                "num_objects" => spec.num_objects = parse_value(v)?,
                "depth_near" => spec.depth_range.0 = parse_value(v)?,
                "depth_far" => spec.depth_range.1 = parse_value(v)?,
                "texture_seed" => spec.texture_seed = parse_value(v)?,
                "height" => spec.image_size.0 = parse_value(v)?,
                "width" => spec.image_size.1 = parse_value(v)?,
                "num_classes" => spec.num_classes = parse_value(v)?,
                "max_displacement" => spec.max_displacement = parse_value(v)?,
                _ => return Err(format!("unknown key `{k}`")),
            }
            Ok(())
        })();
        r.map_err(err)?;
    }
    spec.validate()?;
    Ok((spec, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "phase.1.mode = supervised\nphase.1.split = train\nphase.1.steps = 10\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let p = parse_config(MINIMAL).unwrap();
        assert_eq!(p.phases.len(), 1);
        assert_eq!(p.model, ModelConfig::compact());
        assert_eq!(p.train, TrainConfig::default());
        assert_eq!(p.train.alpha, 0.75);
    }

    #[test]
    fn alpha_out_of_range() {
        let e = parse_config(&format!("{MINIMAL}alpha = 1.5\n")).unwrap_err();
        assert!(e.to_string().contains("(0.5, 1)"), "{e}");
        let e = parse_config(&format!("{MINIMAL}phase.1.alpha = 0.5\n")).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_config(&format!("# comment\n\n{MINIMAL}train.lr = 0.1\nbogus = 3\n")).unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 7);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn semi_first_is_rejected() {
        let e = parse_config("phase.1.mode = semi\nphase.1.split = a\nphase.1.steps = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn three_phase_round_trip() {
        let text = "\
seed = 11
phase.3.mode = semi
phase.3.split = k
phase.3.steps = 5
phase.1.mode = supervised
phase.1.split = v
phase.1.steps = 100
phase.2.mode = semi
phase.2.split = c
phase.2.steps = 50
phase.2.lr = 0.0003
phase.2.alpha = 0.9
cta.mode = identity
train.scales = 1,1.5
";
        let p = parse_config(text).unwrap();
        let splits: Vec<&str> = p.phases.iter().map(|p| p.split.as_str()).collect();
        assert_eq!(splits, ["v", "c", "k"]);
        assert_eq!(p.phases[1].alpha, Some(0.9));
        let back = parse_config(&serialize_config(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(serialize_config(&back), serialize_config(&p));
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let p = parse_config(&format!("refine.iters = 4\nmodel.preset = full\n{MINIMAL}")).unwrap();
        assert_eq!(p.model.refine.iters, 4);
        assert_eq!(p.model.backbone, ModelConfig::default().backbone);
    }

    #[test]
    fn scene_spec_file() {
        let (s, m) = parse_scene_spec("mode = flow\nheight = 64\nnum_objects = 5\n").unwrap();
        assert_eq!((m, s.image_size, s.num_objects), (Mode::Flow, (64, 128), 5));
        assert!(matches!(parse_scene_spec("height = 50\n"), Err(Error::Config(_))));
        assert!(matches!(parse_scene_spec("\ncolour = red\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn gaps_and_duplicates() {
        let e = parse_config("phase.2.mode = supervised\nphase.2.split = a\nphase.2.steps = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = parse_config(&format!("{MINIMAL}seed = 1\nseed = 2\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 5, .. }));
    }
}
