use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use twins::config::{parse_config, parse_scene_spec, EvalWeights, PhaseMode};
use twins::data::{io, synth::generate_many};
use twins::plan::{evaluate, export_pseudo_labels, load_model, run_plan, RunOptions};
use twins::trainer::Checkpoint;

#[derive(Parser)]
#[command(name = "twins", about = "Joint scene parsing and dense correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Semi,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Student,
    Teacher,
}

impl From<WeightsArg> for EvalWeights {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Student => EvalWeights::Student,
            WeightsArg::Teacher => EvalWeights::Teacher,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the phases of an experiment plan.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only phases of this kind (earlier phases must have checkpoints).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps, keeping a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "student")]
        weights: WeightsArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export teacher pseudo labels with a coverage report.
    Pseudo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "pseudo")]
        out: PathBuf,
    },
    /// Synthesize a dataset split.
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop correspondence labels (the segmentation-only regime).
        #[arg(long)]
        seg_only: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, mode, data, out, dry_run, resume, stop_after } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut plan = parse_config(&text).with_context(|| format!("in {}", config.display()))?;
            if let Some(o) = out {
                plan.output_dir = o;
            }
            let Some(root) = data.or_else(|| plan.data_root.clone()) else {
                bail!("no data root: pass --data or set data_root in the config");
            };
            let opts = RunOptions {
                dry_run,
                resume,
                stop_after,
                only: mode.map(|m| match m {
                    ModeArg::Supervised => PhaseMode::Supervised,
                    ModeArg::Semi => PhaseMode::Semi,
                }),
            };
            let summary = run_plan(&plan, &root, &opts)?;
            if dry_run {
                println!("dry run ok: {} phases validated", plan.phases.len());
                return Ok(());
            }
            for p in &summary.phases {
                match &p.report {
                    Some(r) => println!("phase {}: {} epe={:.4} d1={:.2} miou={:.2}", p.phase, p.checkpoint.display(), r.epe, r.d1, r.miou),
                    None => println!("phase {}: {}", p.phase, p.checkpoint.display()),
                }
            }
            if summary.interrupted {
                println!("stopped after {} steps; rerun with --resume to continue", summary.steps_run);
            }
        }
        Command::Eval { ckpt, data, split, weights, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (plan, state) = load_model(&ck, weights.into())?;
            let items = io::read_split(&data, &split)?;
            let report = evaluate(&state.student, &items, plan.model.decoder.num_classes, state.dtype())?;
            let text = report.to_text();
            print!("{text}");
            if let Some(o) = out {
                fs::write(&o, &text).with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::Pseudo { ckpt, data, alpha, split, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (_, state) = load_model(&ck, EvalWeights::Teacher)?;
            let items = io::list_split(&data, &split)?
                .into_iter()
                .map(|p| {
                    let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    Ok((name, io::read_collection(&p)?))
                })
                .collect::<twins::Result<Vec<_>>>()?;
            let q = export_pseudo_labels(&state.student, &items, alpha, state.dtype(), Some(&out))?;
            let text = q.to_text();
            fs::write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Gen { spec, count, out, split, seed, seg_only } => {
            let (scene, mode) = match spec {
                Some(p) => parse_scene_spec(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => (Default::default(), twins::data::Mode::Stereo),
            };
            let mut items = generate_many(&scene, mode, seed, count)?;
            if seg_only {
                items = items.iter().map(|c| c.without_correspondence()).collect();
            }
            io::write_split(&out, &split, &items)?;
            println!("wrote {count} {mode} scenes to {}", out.join(&split).display());
        }
    }
    Ok(())
}
