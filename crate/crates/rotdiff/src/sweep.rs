//! Rotation sweeps over a dataset directory, and the reduced desk experiment
//! that trains and compares the five reference models.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rotdiff_core::blocks::Backend;
use rotdiff_core::dataset::{psnr, DatasetPlan, Pair, Psnr};
use rotdiff_core::eval::{evaluate_set, mean_psnr, SweepReport};
use rotdiff_core::model::{ModelConfig, ModelVariant, ParamVector};
use rotdiff_core::trainer::TrainConfig;

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, CliResult};
use crate::manifest::{self, plan_hash, Dataset, Manifest, MANIFEST_FILE};
use crate::report::ReportFile;
use crate::training::{self, Outputs};

/// Report row name of the noisy inputs as 8-bit pictures.
pub const NOISY_LABEL: &str = "noisy";

pub fn worker_count() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Maps `f` over `items` on up to `threads` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Short report name such as `aniso`, `iso_a0.5` or `uncoupled_adjoint`.
/// Stencil models at `alpha = 0.41, gamma = 0` carry no suffix.
pub fn model_label(model: &ModelConfig) -> String {
    let name = model.variant.name();
    match model.backend {
        Backend::AdjointComposition => format!("{name}_adjoint"),
        Backend::Stencil { alpha, gamma } => {
            let mut s = String::from(name);
            if alpha != 0.41 {
                s.push_str(&format!("_a{alpha}"));
            }
            if gamma != 0.0 {
                s.push_str(&format!("_g{gamma}"));
            }
            s
        }
    }
}

/// A trained model ready for evaluation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub label: String,
    pub model: ModelConfig,
    pub params: ParamVector,
}

impl Trained {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            label: model_label(&ckpt.model),
            model: ckpt.model.clone(),
            params: ckpt.state.params,
        }
    }
}

/// Per-angle evaluation results.
#[derive(Debug, Clone, Default)]
pub struct Sweep {
    pub report: SweepReport,
    pub excluded: usize,
}

fn load_angles(data: &Dataset) -> CliResult<Vec<(f64, Vec<Pair>)>> {
    data.test_angles()
        .iter()
        .map(|&a| Ok((a, data.test_pairs(a)?)))
        .collect()
}

/// Mean PSNR of every model at every test angle, plus the noisy baseline when asked.
pub fn evaluate_sweep(models: &[Trained], data: &Dataset, with_baseline: bool, threads: usize) -> CliResult<Sweep> {
    let angles = load_angles(data)?;
    if angles.iter().any(|(_, p)| p.is_empty()) {
        return Err(CliError::Invalid("a test angle has no images".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..angles.len()).map(move |a| (m, a)))
        .collect();
    let scores = parallel_map(&jobs, threads, |&(m, a)| {
        evaluate_set(&models[m].model, &models[m].params, &angles[a].1)
    });
    let mut sweep = Sweep::default();
    if with_baseline {
        for (angle, pairs) in &angles {
            sweep.report.push(NOISY_LABEL, *angle, noisy_display_psnr(pairs)?);
        }
    }
    for (&(m, a), score) in jobs.iter().zip(scores) {
        let score = score?;
        if score.excluded > 0 {
            log::warn!(
                "{} at {} degrees: {} images excluded after blowup",
                models[m].label,
                angles[a].0,
                score.excluded
            );
        }
        sweep.excluded += score.excluded;
        sweep.report.push(&models[m].label, angles[a].0, score.mean_psnr_db);
    }
    sweep.report.sort();
    Ok(sweep)
}

/// Mean PSNR of the noisy images as an 8-bit display shows them.
pub fn noisy_display_psnr(pairs: &[Pair]) -> CliResult<f64> {
    let outputs = pairs
        .iter()
        .map(|p| psnr(&p.noisy_display(), &p.clean).map(|v| (v, true)))
        .collect::<Result<Vec<(Psnr, bool)>, _>>()?;
    Ok(mean_psnr(&outputs)?.mean_psnr_db)
}

/// One model of the desk experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub alpha: f64,
    pub gamma: f64,
}

impl ModelSpec {
    pub fn config(&self) -> CliResult<ModelConfig> {
        Ok(ModelConfig::new(
            self.variant,
            Backend::Stencil {
                alpha: self.alpha,
                gamma: self.gamma,
            },
        )?)
    }
}

/// Uncoupled, iso and aniso at `alpha = 0.41`, then iso and aniso at `alpha = 0.5`; `gamma = 0`.
pub fn reference_models() -> Vec<ModelSpec> {
    let spec = |variant, alpha| ModelSpec {
        variant,
        alpha,
        gamma: 0.0,
    };
    vec![
        spec(ModelVariant::UncoupledIso, 0.41),
        spec(ModelVariant::CoupledIso, 0.41),
        spec(ModelVariant::CoupledAniso, 0.41),
        spec(ModelVariant::CoupledIso, 0.5),
        spec(ModelVariant::CoupledAniso, 0.5),
    ]
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub plan: DatasetPlan,
    pub train: TrainConfig,
    pub models: Vec<ModelSpec>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub sweep: Sweep,
    pub checkpoints: Vec<PathBuf>,
    pub report_path: PathBuf,
}

/// Uses the dataset in `dir` when its plan matches, otherwise generates it.
pub fn ensure_dataset(plan: &DatasetPlan, dir: &Path) -> CliResult<Dataset> {
    if dir.join(MANIFEST_FILE).exists() {
        if let Ok(m) = Manifest::read(dir) {
            if plan_hash(&m.plan) == plan_hash(plan) {
                log::info!("reusing dataset in {}", dir.display());
                return Dataset::open(dir);
            }
        }
    }
    manifest::generate(plan, dir)?;
    Dataset::open(dir)
}

/// Generates the data, trains every model (resuming finished or partial
/// checkpoints with matching settings), evaluates the sweep and writes
/// `report.csv` with its gnuplot companion.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<ExperimentOutcome> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let data = ensure_dataset(&cfg.plan, &cfg.out.join("data"))?;
    let data_hash = plan_hash(&data.manifest.plan);
    let pairs = data.train_pairs()?;
    let models = cfg.models.iter().map(ModelSpec::config).collect::<CliResult<Vec<_>>>()?;

    let trained = parallel_map(&models, cfg.threads, |model| -> CliResult<(Trained, PathBuf)> {
        let label = model_label(model);
        let ckpt_path = cfg.out.join(format!("{label}.ckpt"));
        let log_path = cfg.out.join(format!("{label}_loss.csv"));
        let resume = match Checkpoint::read(&ckpt_path) {
            Ok(c) if c.config_hash() == crate::checkpoint::config_hash(model, &cfg.train) && c.data_hash == data_hash => {
                Some(c)
            }
            _ => None,
        };
        let mut state = training::start_state(model, &cfg.train, resume.as_ref())?;
        log::info!("{label}: training from epoch {}", state.epoch);
        training::run(
            model,
            &cfg.train,
            &mut state,
            &pairs,
            &data_hash,
            Outputs {
                checkpoint: &ckpt_path,
                loss_log: Some(&log_path),
            },
        )?;
        log::info!("{label}: {}", state.params.describe());
        Ok((
            Trained {
                label,
                model: model.clone(),
                params: state.params,
            },
            ckpt_path,
        ))
    });
    let (trained, checkpoints): (Vec<_>, Vec<_>) = trained.into_iter().collect::<CliResult<Vec<_>>>()?.into_iter().unzip();

    let sweep = evaluate_sweep(&trained, &data, true, cfg.threads)?;
    let report_path = cfg.out.join("report.csv");
    ReportFile::new(sweep.report.clone())
        .with_meta("data_hash", data_hash)
        .with_meta("epochs", cfg.train.epochs.to_string())
        .with_meta("excluded_images", sweep.excluded.to_string())
        .write(&report_path)?;
    Ok(ExperimentOutcome {
        sweep,
        checkpoints,
        report_path,
    })
}
