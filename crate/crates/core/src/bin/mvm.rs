use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mvm_core::data::{load_study, save_study};
use mvm_core::phase_synth::{build_phase_dataset, synthesize_phases_with, train_phase, PhaseModel};
use mvm_core::pipeline::{
    self, assess_study, downsample_and_fill, gan_ablation, ksweep_report, load_splits, run_full_pipeline,
    score_interpolation, summarize, write_json, DataSpec, InterpMethod, PhaseSource, PipelineConfig,
};
use mvm_core::seed;
use mvm_core::temporal_interp::{build_interp_dataset, train_interp, FlowFiller, GapFiller, InterpModel, LinearFiller};
use mvm_core::toy_experiment::{run_toy_comparison, ToyTask};
use mvm_core::MvmError;

#[derive(Parser)]
#[command(name = "mvm", version, about = "Velocity-mapping digital twins: interpolation, phase synthesis, assessment")]
struct Cli {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured phantom splits as study directories.
    PhantomGen,
    /// Train the temporal interpolation network for one K.
    TrainInterp {
        #[arg(long)]
        k: usize,
        /// 1 = shared encoder variant.
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        adversarial_weight: Option<f32>,
    },
    /// Train the phase generator.
    TrainPhase,
    /// Downsample a study by K and fill the gaps.
    InferInterp {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "learned")]
        method: InterpMethod,
        /// Required with `--method learned`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize every phase frame of a study from its magnitudes.
    InferPhase {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use raw generator output everywhere instead of compositing noise.
        #[arg(long)]
        no_composite: bool,
    },
    /// Compare global velocity curves of a synthetic study with a real one.
    Assess {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Image metrics of reconstructed frames against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Compare interpolation methods over K.
    Ksweep,
    /// Interpolation trained with and without the adversarial term.
    GanAblation,
    /// Plain vs adversarial loss on the synthetic circle tasks.
    ToyExp {
        #[arg(long, value_enum, default_value = "shape")]
        task: ToyTask,
    },
    /// Downsample, interpolate, synthesize and assess for every K.
    Pipeline {
        #[arg(long, value_enum)]
        method: Option<InterpMethod>,
        #[arg(long, value_enum)]
        phase_source: Option<PhaseSource>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<MvmError> for Failure {
    fn from(e: MvmError) -> Self {
        match e {
            MvmError::Config(_) => Failure::Config(e.into()),
            e => Failure::Stage(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Config)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(Failure::Config)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg.seeded())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.cmd {
        Cmd::PhantomGen => {
            let DataSpec::Phantom { .. } = cfg.data else {
                return Err(Failure::Config(anyhow::anyhow!("phantom-gen needs a phantom data source")));
            };
            let splits = load_splits(&cfg)?;
            for (name, studies) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                for st in studies.iter() {
                    save_study(st, &out.join(name).join(&st.meta().subject_id))?;
                }
            }
        }
        Cmd::TrainInterp { k, heads, adversarial_weight } => {
            if *k == 0 {
                return Err(Failure::Config(anyhow::anyhow!("--k must be at least 1")));
            }
            if let Some(h) = heads {
                cfg.interp_net.heads = *h;
            }
            if let Some(w) = adversarial_weight {
                cfg.interp_train.adversarial_weight = *w;
            }
            cfg.validate().map_err(|e| Failure::Config(e.into()))?;
            let splits = load_splits(&cfg).map_err(|e| e.in_stage(pipeline::STAGE_DATA))?;
            let train = build_interp_dataset(&splits.train, *k, cfg.roi_pad)?;
            let val = if splits.val.is_empty() {
                Vec::new()
            } else {
                build_interp_dataset(&splits.val, *k, cfg.roi_pad)?
            };
            let (model, report) = train_interp(&train, &val, &cfg.interp_net, &cfg.interp_train)
                .map_err(|e| e.in_stage(pipeline::STAGE_TRAIN_INTERP))?;
            model.save(out)?;
            write_json(&out.join("train_report.json"), &report)?;
        }
        Cmd::TrainPhase => {
            let splits = load_splits(&cfg).map_err(|e| e.in_stage(pipeline::STAGE_DATA))?;
            let (model, report) = train_phase(
                &build_phase_dataset(&splits.train)?,
                &build_phase_dataset(&splits.val)?,
                &cfg.phase_net,
                &cfg.phase_train,
            )
            .map_err(|e| e.in_stage(pipeline::STAGE_TRAIN_PHASE))?;
            model.save(out)?;
            write_json(&out.join("train_report.json"), &report)?;
        }
        Cmd::InferInterp { study, k, method, checkpoint } => {
            if *method == InterpMethod::Learned && checkpoint.is_none() {
                return Err(Failure::Config(anyhow::anyhow!("--checkpoint is required with --method learned")));
            }
            let st = load_study(study)?;
            let model;
            let flow = FlowFiller(cfg.flow);
            let filler: &dyn GapFiller = match method {
                InterpMethod::Learned => {
                    model = InterpModel::load(checkpoint.as_deref().expect("checked above"))?;
                    &model
                }
                InterpMethod::Linear => &LinearFiller,
                InterpMethod::Flow => &flow,
            };
            let pred = downsample_and_fill(filler, &st, *k).map_err(|e| e.in_stage(pipeline::STAGE_INTERPOLATE))?;
            save_study(&pred, out)?;
        }
        Cmd::InferPhase { study, checkpoint, no_composite } => {
            let st = load_study(study)?;
            let model = PhaseModel::load(checkpoint)?;
            let composite = model.config().composite && !no_composite;
            let sd = seed::derive(cfg.seed, &[0x5e]);
            let syn = synthesize_phases_with(&model, &st, &cfg.noise, sd, composite)
                .map_err(|e| e.in_stage(pipeline::STAGE_SYNTHESIZE))?;
            save_study(&syn, out)?;
        }
        Cmd::Assess { real, synthetic } => {
            let (a, rc, sc) = assess_study(&load_study(real)?, &load_study(synthetic)?)
                .map_err(|e| e.in_stage(pipeline::STAGE_ASSESS))?;
            write_json(&out.join("assessment.json"), &a)?;
            fs::write(out.join("real_curves.csv"), rc.to_csv()).context("writing curves")?;
            fs::write(out.join("synthetic_curves.csv"), sc.to_csv()).context("writing curves")?;
        }
        Cmd::Metrics { pred, gt, k } => {
            let reports = score_interpolation(&load_study(pred)?, &load_study(gt)?, *k, cfg.roi_pad)?;
            write_json(&out.join("metrics.json"), &summarize(&reports))?;
            write_json(&out.join("frames.json"), &reports)?;
        }
        Cmd::Ksweep => {
            ksweep_report(&cfg, out)?;
        }
        Cmd::GanAblation => {
            gan_ablation(&cfg, out)?;
        }
        Cmd::ToyExp { task } => {
            cfg.toy.task = *task;
            let report = run_toy_comparison(&cfg.toy).map_err(|e| e.in_stage("toy"))?;
            let name = match task {
                ToyTask::Shape => "toy_shape.json",
                ToyTask::Texture => "toy_texture.json",
            };
            write_json(&out.join(name), &report)?;
        }
        Cmd::Pipeline { method, phase_source } => {
            if let Some(m) = method {
                cfg.method = *m;
            }
            if let Some(p) = phase_source {
                cfg.phase_source = *p;
            }
            run_full_pipeline(&cfg, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
