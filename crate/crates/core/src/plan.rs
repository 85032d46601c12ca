//! Multi-phase experiment execution, evaluation and pseudo-label export.
//!
//! Output layout under `plan.output_dir`:
//!
//! ```text
//! config.txt                  canonical plan
//! phase<N>.ckpt               full trainer state after phase N
//! phase<N>.partial.ckpt       mid-phase state (interval saves, interruptions)
//! phase<N>_losses.csv         step,term,value
//! phase<N>_report.txt         metrics on the evaluation split
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{serialize_config, EvalWeights, ExperimentPlan, PhaseMode};
use crate::data::augment::{Geometry, Photometric};
use crate::data::batch::chw_to_raster;
use crate::data::{io, Batch, ImageCollection, Mode, Raster};
use crate::error::{Error, Result};
use crate::metrics::{CorrAccumulator, MetricReport, SegAccumulator};
use crate::model::TwinsModel;
use crate::trainer::{make_pseudo_labels, semi_supervised_step, supervised_step, Checkpoint, LossReport, TrainerState};

/// Deterministic generator for one step of one phase, so a resumed run draws
/// the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, phase: usize, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ (phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// `count` distinct indices into `0..n` (fewer if `n` is smaller).
pub fn sample_indices<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

/// Final field, σ and class map for a single collection.
pub struct Prediction {
    pub field: Raster<f32>,
    pub sigma: Raster<f32>,
    pub classes: Vec<u32>,
}

pub fn predict(model: &TwinsModel, c: &ImageCollection, dtype: DType) -> Result<Prediction> {
    let b = Batch::from_collections(&[c], dtype, &Device::Cpu)?;
    let out = model.forward(&b.target, &b.source)?;
    Ok(Prediction {
        field: chw_to_raster(&out.field().get(0)?)?,
        sigma: chw_to_raster(&out.sigma.get(0)?)?,
        classes: out.seg.predict()?.get(0)?.flatten_all()?.to_vec1::<u32>()?,
    })
}

/// Metrics over every collection; missing labels simply do not contribute.
pub fn evaluate(model: &TwinsModel, items: &[ImageCollection], num_classes: usize, dtype: DType) -> Result<MetricReport> {
    let mut seg = SegAccumulator::new(num_classes);
    let mut corr = CorrAccumulator::default();
    for c in items {
        let p = predict(model, c, dtype)?;
        if let Some(gt) = &c.segmentation {
            let gt: Vec<u32> = gt.data.iter().map(|&v| v as u32).collect();
            seg.add(&p.classes, &gt)?;
        }
        if let Some(gt) = &c.correspondence {
            corr.add(&p.field, gt, c.valid.as_ref())?;
        }
    }
    Ok(MetricReport::new(&seg.finish(), &corr.finish()))
}

/// Coverage and accuracy of pseudo labels against withheld ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuality {
    pub alpha: f64,
    /// Selected fraction over all pixels.
    pub coverage: f64,
    /// EPE over selected pixels that also carry valid ground truth.
    pub selected_epe: f64,
    /// EPE over all pixels with valid ground truth.
    pub all_epe: f64,
    pub selected_count: u64,
    pub all_count: u64,
}

impl PseudoQuality {
    pub fn to_text(&self) -> String {
        format!(
            "alpha={}\ncoverage={:.6}\nselected_epe={:.6}\nall_epe={:.6}\nselected_count={}\nall_count={}\n",
            self.alpha, self.coverage, self.selected_epe, self.all_epe, self.selected_count, self.all_count
        )
    }
}

/// Runs `model` as a teacher over `items`, optionally writing `corr.bin` and
/// `valid.bin` for each into `out/<name>/`.
pub fn export_pseudo_labels(
    model: &TwinsModel,
    items: &[(String, ImageCollection)],
    alpha: f64,
    dtype: DType,
    out: Option<&Path>,
) -> Result<PseudoQuality> {
    let mut selected = CorrAccumulator::default();
    let mut all = CorrAccumulator::default();
    let (mut kept, mut total) = (0.0, 0.0);
    for (name, c) in items {
        let p = predict(model, c, dtype)?;
        let labels = make_pseudo_labels(&p.field, &p.sigma, alpha)?;
        kept += labels.coverage * labels.validity.data.len() as f64;
        total += labels.validity.data.len() as f64;
        if let Some(gt) = &c.correspondence {
            let gt_valid = c.valid.clone().unwrap_or_else(|| Raster::filled(c.height(), c.width(), 1, 1.0));
            all.add(&p.field, gt, Some(&gt_valid))?;
            let mut both = gt_valid.clone();
            for (b, &v) in both.data.iter_mut().zip(&labels.validity.data) {
                *b *= v;
            }
            selected.add(&p.field, gt, Some(&both))?;
        }
        if let Some(dir) = out {
            let d = dir.join(name);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            io::write_field(&labels.correspondence, &d.join("corr.bin"))?;
            io::write_field(&labels.validity, &d.join("valid.bin"))?;
        }
    }
    let (s, a) = (selected.finish(), all.finish());
    Ok(PseudoQuality {
        alpha,
        coverage: if total > 0.0 { kept / total } else { 0.0 },
        selected_epe: s.epe,
        all_epe: a.epe,
        selected_count: s.count,
        all_count: a.count,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop (saving a partial checkpoint) after this many steps in this invocation.
    pub stop_after: Option<u64>,
    /// Run only phases of this kind; earlier phases of the other kind must
    /// already have checkpoints in the output directory.
    pub only: Option<PhaseMode>,
}

#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub phase: usize,
    pub checkpoint: PathBuf,
    pub report: Option<MetricReport>,
    pub last_losses: Option<LossReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub phases: Vec<PhaseResult>,
    pub interrupted: bool,
    pub steps_run: u64,
}

fn load_split(root: &Path, split: &str, plan: &ExperimentPlan) -> Result<Vec<ImageCollection>> {
    let items = io::read_split(root, split)?;
    if items.is_empty() {
        return Err(Error::Data(format!("split `{split}` under {} is empty", root.display())));
    }
    for (i, c) in items.iter().enumerate() {
        c.validate(Some(plan.model.decoder.num_classes))
            .map_err(|e| Error::Data(format!("split `{split}` item {i}: {e}")))?;
        if c.mode != plan.model.mode {
            return Err(Error::Data(format!(
                "split `{split}` item {i} is {} data but the model is configured for {}",
                c.mode, plan.model.mode
            )));
        }
    }
    Ok(items)
}

fn phase_paths(dir: &Path, n: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("phase{n}.ckpt")),
        dir.join(format!("phase{n}.partial.ckpt")),
        dir.join(format!("phase{n}_losses.csv")),
        dir.join(format!("phase{n}_report.txt")),
    )
}

fn metadata(plan: &ExperimentPlan, phase: usize, phase_step: u64, complete: bool) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config".to_string(), serialize_config(plan)),
        ("phase".to_string(), phase.to_string()),
        ("phase_step".to_string(), phase_step.to_string()),
        ("complete".to_string(), complete.to_string()),
    ])
}

fn meta_num(ck: &Checkpoint, key: &str) -> Result<u64> {
    ck.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}` metadata")))
}

/// Keeps only loss rows of steps before `before`, or starts a fresh file.
fn open_loss_log(path: &Path, before: Option<u64>) -> Result<BufWriter<fs::File>> {
    let mut kept = String::from("step,term,value\n");
    if let (Some(limit), Ok(text)) = (before, fs::read_to_string(path)) {
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < limit) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    let f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn log_losses(w: &mut impl Write, step: u64, r: &LossReport, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    for (k, v) in &r.terms {
        writeln!(w, "{step},{k},{v}").map_err(io_err)?;
    }
    if let Some(c) = r.coverage {
        writeln!(w, "{step},coverage,{c}").map_err(io_err)?;
    }
    Ok(())
}

/// One training step of `phase` at phase-local `step`.
pub fn phase_step(
    state: &mut TrainerState,
    plan: &ExperimentPlan,
    phase_index: usize,
    step: u64,
    items: &[ImageCollection],
) -> Result<LossReport> {
    let phase = &plan.phases[phase_index - 1];
    let tc = phase.train_config(&plan.train);
    let lr = plan.lr_at(tc.optimizer.lr, step, phase.steps);
    let mut rng = step_rng(plan.seed, phase_index, step);
    let idx = sample_indices(&mut rng, items.len(), tc.batch_size);
    let chosen: Vec<&ImageCollection> = idx.iter().map(|&i| &items[i]).collect();
    match phase.mode {
        PhaseMode::Supervised => {
            let views: Vec<ImageCollection> = if tc.augment {
                chosen
                    .iter()
                    .map(|c| {
                        let size = (c.height(), c.width());
                        let out = if tc.weak_crop.0 == 0 { size } else { tc.weak_crop };
                        let g = Geometry::sample(&mut rng, size, out, &tc.scales, c.mode == Mode::Flow)?;
                        let p = Photometric::sample(&mut rng, &tc.photometric, out);
                        Ok(p.apply(&g.apply(c)?))
                    })
                    .collect::<Result<_>>()?
            } else {
                chosen.iter().map(|c| (*c).clone()).collect()
            };
            let refs: Vec<&ImageCollection> = views.iter().collect();
            let batch = Batch::from_collections(&refs, state.dtype(), &Device::Cpu)?;
            supervised_step(state, &batch, &tc, lr)
        }
        PhaseMode::Semi => semi_supervised_step(state, &chosen, &tc, lr, &mut rng),
    }
}

/// Executes every phase in order. See the module docs for the files written.
pub fn run_plan(plan: &ExperimentPlan, data_root: &Path, opts: &RunOptions) -> Result<RunSummary> {
    plan.validate()?;
    if !data_root.is_dir() {
        return Err(Error::io(
            data_root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root does not exist"),
        ));
    }
    // Load everything up front so a bad split fails before any training.
    let mut splits: BTreeMap<String, Vec<ImageCollection>> = BTreeMap::new();
    for p in &plan.phases {
        if !splits.contains_key(&p.split) {
            splits.insert(p.split.clone(), load_split(data_root, &p.split, plan)?);
        }
        if p.mode == PhaseMode::Supervised && splits[&p.split].iter().any(|c| c.correspondence.is_none()) {
            return Err(Error::Data(format!(
                "supervised phase uses split `{}`, which lacks correspondence labels",
                p.split
            )));
        }
    }
    if !plan.eval_split.is_empty() && !splits.contains_key(&plan.eval_split) {
        splits.insert(plan.eval_split.clone(), load_split(data_root, &plan.eval_split, plan)?);
    }
    let dtype = DType::F32;
    let first_train = plan.phases[0].train_config(&plan.train);
    let mut state = TrainerState::new(&plan.model, &first_train, plan.seed, dtype)?;
    let mut summary = RunSummary::default();
    if opts.dry_run {
        log::info!(
            "dry run: {} phases, {} parameters, data looks consistent",
            plan.phases.len(),
            state.student_store.num_scalars()
        );
        return Ok(summary);
    }

    let out = &plan.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, serialize_config(plan)).map_err(|e| Error::io(&cfg_path, e))?;

    // Resume point: first phase without a final checkpoint, possibly mid-way.
    let mut start_phase = 1;
    let mut start_step = 0;
    if opts.resume {
        for n in 1..=plan.phases.len() {
            let (done, partial, ..) = phase_paths(out, n);
            if done.exists() {
                start_phase = n + 1;
                start_step = 0;
                let ck = Checkpoint::load(&done)?;
                state = TrainerState::from_checkpoint(&ck, &plan.model, &plan.phases[n - 1].train_config(&plan.train), dtype)?;
                summary.phases.push(PhaseResult { phase: n, checkpoint: done, report: None, last_losses: None });
            } else {
                if partial.exists() {
                    let ck = Checkpoint::load(&partial)?;
                    if meta_num(&ck, "phase")? as usize != n {
                        return Err(Error::Checkpoint(format!("{} belongs to another phase", partial.display())));
                    }
                    start_step = meta_num(&ck, "phase_step")?;
                    state = TrainerState::from_checkpoint(&ck, &plan.model, &plan.phases[n - 1].train_config(&plan.train), dtype)?;
                }
                break;
            }
        }
        log::info!("resuming at phase {start_phase}, step {start_step}");
    }

    let last_phase = match opts.only {
        None => plan.phases.len(),
        Some(m) => plan.phases.iter().rposition(|p| p.mode == m).map_or(0, |i| i + 1),
    };
    for n in start_phase..=last_phase {
        let phase = &plan.phases[n - 1];
        let (done, partial, csv, report_path) = phase_paths(out, n);
        if opts.only.is_some_and(|m| m != phase.mode) {
            if !done.exists() {
                return Err(Error::Checkpoint(format!(
                    "phase {n} ({}) has not been run: {} is missing",
                    phase.mode.as_str(),
                    done.display()
                )));
            }
            let ck = Checkpoint::load(&done)?;
            state = TrainerState::from_checkpoint(&ck, &plan.model, &phase.train_config(&plan.train), dtype)?;
            summary.phases.push(PhaseResult { phase: n, checkpoint: done, report: None, last_losses: None });
            continue;
        }
        let tc = phase.train_config(&plan.train);
        state.ema_momentum = tc.ema_momentum;
        state.optimizer.config = tc.optimizer;
        let items = &splits[&phase.split];
        let first = if n == start_phase { start_step } else { 0 };
        let mut log = open_loss_log(&csv, (first > 0).then_some(first))?;
        let mut last = None;
        for step in first..phase.steps {
            if opts.stop_after.is_some_and(|s| summary.steps_run >= s) {
                log.flush().map_err(|e| Error::io(&csv, e))?;
                state.to_checkpoint(metadata(plan, n, step, false))?.save(&partial)?;
                summary.interrupted = true;
                return Ok(summary);
            }
            let r = phase_step(&mut state, plan, n, step, items)?;
            log_losses(&mut log, step, &r, &csv)?;
            if step % 50 == 0 {
                log::info!("phase {n} step {step}: total {:.4}", r.get("total").unwrap_or(f64::NAN));
            }
            last = Some(r);
            summary.steps_run += 1;
            if plan.checkpoint_every > 0 && (step + 1) % plan.checkpoint_every == 0 && step + 1 < phase.steps {
                log.flush().map_err(|e| Error::io(&csv, e))?;
                state.to_checkpoint(metadata(plan, n, step + 1, false))?.save(&partial)?;
            }
        }
        log.flush().map_err(|e| Error::io(&csv, e))?;
        state.to_checkpoint(metadata(plan, n, phase.steps, true))?.save(&done)?;
        if partial.exists() {
            fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        let report = if plan.eval_split.is_empty() {
            None
        } else {
            let model = match plan.eval_weights {
                EvalWeights::Student => &state.student,
                EvalWeights::Teacher => &state.teacher,
            };
            let r = evaluate(model, &splits[&plan.eval_split], plan.model.decoder.num_classes, dtype)?;
            fs::write(&report_path, r.to_text()).map_err(|e| Error::io(&report_path, e))?;
            log::info!("phase {n}: epe {:.4} d1 {:.2} miou {:.2}", r.epe, r.d1, r.miou);
            Some(r)
        };
        summary.phases.push(PhaseResult { phase: n, checkpoint: done, report, last_losses: last });
    }
    Ok(summary)
}

/// Rebuilds the plan stored in a checkpoint and the requested weights.
pub fn load_model(ck: &Checkpoint, weights: EvalWeights) -> Result<(ExperimentPlan, TrainerState)> {
    let text = ck
        .metadata
        .get("config")
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no configuration".into()))?;
    let plan = crate::config::parse_config(text)?;
    let mut state = TrainerState::from_checkpoint(ck, &plan.model, &plan.train, DType::F32)?;
    if weights == EvalWeights::Teacher {
        std::mem::swap(&mut state.student, &mut state.teacher);
        std::mem::swap(&mut state.student_store, &mut state.teacher_store);
    }
    Ok((plan, state))
}
