//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rotdiff_core::blocks::Backend;
use rotdiff_core::dataset::{sweep_angles, DatasetPlan, TestScenes};
use rotdiff_core::model::{ModelConfig, ModelVariant};
use rotdiff_core::trainer::{GradientMode, TrainConfig, DEFAULT_FD_REL_STEP};

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, CliResult};
use crate::manifest::{self, plan_hash, Dataset};
use crate::pgm::{self, Depth};
use crate::report::ReportFile;
use crate::sweep::{self, ExperimentConfig, Trained};
use crate::training::{self, Outputs};

#[derive(Debug, Parser)]
#[command(name = "rotdiff", version, about = "Rotation-invariant diffusion denoising")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic rectangle dataset with noisy copies and a manifest.
    GenData(GenDataArgs),
    /// Train one model on the training pairs of a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints on every test angle and write a sweep report.
    Eval(EvalArgs),
    /// Denoise a single PGM image.
    Denoise(DenoiseArgs),
    /// Generate data, train the five reference models and evaluate them.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 256x256, 100 train, 50 test per angle, angles 5..85 in steps of 5.
    Full,
    /// 128x128, 32 train, 16 test per angle, angles 10..80 in steps of 10 and 45.
    Desk,
}

#[derive(Debug, Clone, Args)]
pub struct DataPlanArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub train_angle: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Test angles are the multiples of this step strictly between 0 and 90.
    #[arg(long)]
    pub angle_step: Option<f64>,
    #[arg(long, value_parser = ["fresh", "rotated"])]
    pub test_scenes: Option<String>,
}

impl DataPlanArgs {
    pub fn plan(&self, seed: u64) -> CliResult<DatasetPlan> {
        let mut p = match self.preset {
            Preset::Full => DatasetPlan::full(seed),
            Preset::Desk => DatasetPlan::desk(seed),
        };
        if let Some(v) = self.size {
            p.size = v;
        }
        if let Some(v) = self.train_angle {
            p.train_angle = v;
        }
        if let Some(v) = self.sigma {
            p.noise_sigma = v;
        }
        if let Some(v) = self.train_count {
            p.train_count = v;
        }
        if let Some(v) = self.test_count {
            p.test_count = v;
        }
        if let Some(step) = self.angle_step {
            if !(step > 0.0 && step < 90.0) {
                return Err(CliError::Invalid("angle step must lie in (0, 90)".into()));
            }
            p.test_angles = sweep_angles(step);
        }
        if let Some(name) = &self.test_scenes {
            p.test_scenes = TestScenes::from_name(name).expect("restricted by clap");
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub plan: DataPlanArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Uncoupled,
    Iso,
    Aniso,
}

impl From<ModelArg> for ModelVariant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Uncoupled => Self::UncoupledIso,
            ModelArg::Iso => Self::CoupledIso,
            ModelArg::Aniso => Self::CoupledAniso,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Adjoint,
    Stencil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradientArg {
    /// Central finite differences.
    Fd,
    /// Reverse sweep through the evolution (stencil backend).
    Reverse,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Fd => Self::FiniteDifference,
            GradientArg::Reverse => Self::Reverse,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 250)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Images per Adam step; full batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum, default_value = "fd")]
    pub gradient: GradientArg,
    #[arg(long, default_value_t = DEFAULT_FD_REL_STEP)]
    pub fd_step: f64,
}

impl OptimArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            fd_rel_step: self.fd_step,
            gradient: self.gradient.into(),
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "stencil")]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 0.41)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = rotdiff_core::model::DEFAULT_STEPS)]
    pub steps: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seed of the image order in each epoch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss log CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more checkpoints.
    #[arg(long, required = true, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report the noisy inputs themselves.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub plan: DataPlanArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seeds both the dataset and the training order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Denoise(a) => denoise(&a),
        Command::Experiment(a) => experiment(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let plan = a.plan.plan(a.seed)?;
    let m = manifest::generate(&plan, &a.out)?;
    println!("{} pairs written to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let backend = match a.backend {
        BackendArg::Adjoint => Backend::AdjointComposition,
        BackendArg::Stencil => Backend::Stencil {
            alpha: a.alpha,
            gamma: a.gamma,
        },
    };
    let model = ModelConfig::with_scales(
        a.model.into(),
        backend,
        &rotdiff_core::model::default_scales(),
        a.steps,
    )?;
    let cfg = a.optim.config(a.seed);
    cfg.validate(&model)?;
    let data = Dataset::open(&a.data)?;
    let pairs = data.train_pairs()?;
    let resume = a.resume.as_deref().map(Checkpoint::read).transpose()?;
    let mut state = training::start_state(&model, &cfg, resume.as_ref())?;
    let loss_log = a
        .loss_log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let stats = training::run(
        &model,
        &cfg,
        &mut state,
        &pairs,
        &plan_hash(&data.manifest.plan),
        Outputs {
            checkpoint: &a.out,
            loss_log: Some(&loss_log),
        },
    )?;
    if let Some(last) = stats.last() {
        println!("epoch {} loss {}", last.epoch, last.loss);
    }
    println!("{}", state.params.describe());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let data = Dataset::open(&a.data)?;
    let hash = plan_hash(&data.manifest.plan);
    let mut models = Vec::new();
    let mut hashes = Vec::new();
    for path in &a.ckpt {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.data_hash != hash {
            log::warn!("{} was trained on a different dataset", path.display());
        }
        hashes.push(ckpt.config_hash());
        models.push(Trained::from_checkpoint(&ckpt));
    }
    let threads = a.threads.unwrap_or_else(sweep::worker_count);
    let sweep = sweep::evaluate_sweep(&models, &data, a.baseline, threads)?;
    let mut file = ReportFile::new(sweep.report).with_meta("data_hash", hash);
    for (m, (path, h)) in models.iter().zip(a.ckpt.iter().zip(hashes)) {
        file = file
            .with_meta(&format!("checkpoint.{}", m.label), path.display().to_string())
            .with_meta(&format!("config_hash.{}", m.label), h);
    }
    file = file.with_meta("excluded_images", sweep.excluded.to_string());
    file.write(&a.out)?;
    for (model, var) in file.report.summary() {
        println!("{model}: mean {:.3} dB, variance {:.5} dB", file.report.mean(&model).unwrap_or(f64::NAN), var);
    }
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> CliResult<()> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let (img, _) = pgm::read(&a.input)?;
    let out = ckpt.model.denoise(&ckpt.state.params, &img)?;
    pgm::write(&a.out, &out, Depth::Eight)
}

fn experiment(a: &ExperimentArgs) -> CliResult<()> {
    let cfg = ExperimentConfig {
        out: a.out.clone(),
        plan: a.plan.plan(a.seed)?,
        train: a.optim.config(a.seed),
        models: sweep::reference_models(),
        threads: a.threads.unwrap_or_else(sweep::worker_count),
    };
    let outcome = sweep::run_experiment(&cfg)?;
    for (model, var) in outcome.sweep.report.summary() {
        println!(
            "{model}: mean {:.3} dB, variance {:.5} dB",
            outcome.sweep.report.mean(&model).unwrap_or(f64::NAN),
            var
        );
    }
    println!("report written to {}", outcome.report_path.display());
    Ok(())
}
