//! Training driver: checkpoints after every epoch and a `epoch,loss` CSV log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rotdiff_core::dataset::Pair;
use rotdiff_core::model::{ModelConfig, ParamVector};
use rotdiff_core::trainer::{self, EpochStats, TrainConfig, TrainState};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{CliError, CliResult};

pub const LOSS_HEADER: &str = "epoch,loss";

/// Where training output goes.
#[derive(Debug, Clone, Copy)]
pub struct Outputs<'a> {
    pub checkpoint: &'a Path,
    pub loss_log: Option<&'a Path>,
}

/// The state to start from: the resumed checkpoint when given, otherwise the
/// initial parameters. A resumed checkpoint must carry the same config hash.
pub fn start_state(model: &ModelConfig, cfg: &TrainConfig, resume: Option<&Checkpoint>) -> CliResult<TrainState> {
    match resume {
        None => Ok(TrainState::new(ParamVector::initial(), cfg.seed)),
        Some(ckpt) => {
            if ckpt.config_hash() != config_hash(model, cfg) {
                return Err(CliError::Invalid(
                    "checkpoint was trained with different settings; cannot resume".into(),
                ));
            }
            Ok(ckpt.state.clone())
        }
    }
}

fn append_loss(path: &Path, stats: &EpochStats) -> CliResult<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{},{}", stats.epoch, stats.loss).map_err(|e| CliError::io(path, e))
}

/// Trains to `cfg.epochs`, writing a checkpoint after each epoch.
pub fn run(
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    pairs: &[Pair],
    data_hash: &str,
    out: Outputs<'_>,
) -> CliResult<Vec<EpochStats>> {
    cfg.validate(model)?;
    if let Some(log_path) = out.loss_log {
        if state.epoch == 0 || !log_path.exists() {
            fs::write(log_path, format!("{LOSS_HEADER}\n")).map_err(|e| CliError::io(log_path, e))?;
        }
    }
    let mut failure = None;
    let stats = trainer::train(model, cfg, state, pairs, |st, stats| {
        if failure.is_some() {
            return;
        }
        if stats.penalized_batches > 0 {
            log::warn!("epoch {}: {} batches blew up and were penalized", stats.epoch, stats.penalized_batches);
        }
        let ckpt = Checkpoint {
            model: model.clone(),
            train: cfg.clone(),
            state: st.clone(),
            data_hash: data_hash.to_string(),
        };
        let written = ckpt
            .write(out.checkpoint)
            .and_then(|()| out.loss_log.map_or(Ok(()), |p| append_loss(p, stats)));
        if let Err(e) = written {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if stats.is_empty() {
        // nothing left to train; still leave a checkpoint behind
        Checkpoint {
            model: model.clone(),
            train: cfg.clone(),
            state: state.clone(),
            data_hash: data_hash.to_string(),
        }
        .write(out.checkpoint)?;
    }
    Ok(stats)
}

/// Reads a loss log back as `(epoch, loss)` pairs.
pub fn read_loss_log(path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(CliError::format(path, "missing `epoch,loss` header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (e, v) = l.split_once(',').ok_or_else(|| CliError::format(path, "expected two columns"))?;
            match (e.parse(), v.parse()) {
                (Ok(e), Ok(v)) => Ok((e, v)),
                _ => Err(CliError::format(path, format!("bad row `{l}`"))),
            }
        })
        .collect()
}
