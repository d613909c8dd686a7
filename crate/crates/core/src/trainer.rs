//! Loss, finite-difference gradients and the epoch loop.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::backprop;
use crate::dataset::{mse, Pair};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ParamVector, PARAM_COUNT};

/// Loss reported when the forward pass fails.
pub const PENALTY_LOSS: f64 = 1e9;

pub const DEFAULT_FD_REL_STEP: f64 = 1e-4;
pub const FD_MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub penalized: bool,
}

impl LossValue {
    fn penalty() -> Self {
        Self {
            value: PENALTY_LOSS,
            penalized: true,
        }
    }
}

/// Anything that maps a raw parameter vector to a loss.
pub trait Objective {
    fn loss(&self, params: &ParamVector) -> LossValue;
}

/// Mean per-pixel squared error after the model's evolution, averaged over a batch.
pub fn loss(model: &ModelConfig, params: &ParamVector, batch: &[&Pair]) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(invalid("loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for pair in batch {
        let out = match model.denoise(params, &pair.noisy) {
            Ok(out) => out,
            Err(Error::Blowup { .. }) | Err(Error::NumericalDomain { .. }) => return Ok(LossValue::penalty()),
            Err(e) => return Err(e),
        };
        let err = mse(&out, &pair.clean)?;
        if !err.is_finite() {
            return Ok(LossValue::penalty());
        }
        total += err;
    }
    Ok(LossValue {
        value: total / batch.len() as f64,
        penalized: false,
    })
}

/// A model together with the batch it is evaluated on.
pub struct BatchObjective<'a> {
    pub model: &'a ModelConfig,
    pub batch: Vec<&'a Pair>,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamVector) -> LossValue {
        loss(self.model, params, &self.batch).unwrap_or_else(|_| LossValue::penalty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: [f64; PARAM_COUNT],
    /// Coordinates whose probes were both penalized and whose component was set to zero.
    pub zeroed: Vec<usize>,
    /// Number of penalized probes.
    pub penalized_probes: usize,
}

pub fn fd_step(p: f64, rel_step: f64) -> f64 {
    (rel_step * p.abs()).max(FD_MIN_STEP)
}

/// Central differences in every raw coordinate: 20 loss evaluations.
pub fn fd_gradient<O: Objective + ?Sized>(objective: &O, params: &ParamVector, rel_step: f64) -> Gradient {
    let mut values = [0.0; PARAM_COUNT];
    let mut zeroed = Vec::new();
    let mut penalized_probes = 0;
    for i in 0..PARAM_COUNT {
        let h = fd_step(params.raw[i], rel_step);
        let mut plus = *params;
        plus.raw[i] += h;
        let mut minus = *params;
        minus.raw[i] -= h;
        let hp = plus.raw[i] - params.raw[i];
        let hm = params.raw[i] - minus.raw[i];
        let lp = objective.loss(&plus);
        let lm = objective.loss(&minus);
        penalized_probes += lp.penalized as usize + lm.penalized as usize;
        if lp.penalized && lm.penalized {
            log::warn!("both probes of coordinate {i} hit the blowup penalty; gradient component zeroed");
            zeroed.push(i);
            continue;
        }
        values[i] = (lp.value - lm.value) / (hp + hm);
    }
    Gradient {
        values,
        zeroed,
        penalized_probes,
    }
}

/// How the loss gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Central differences, 20 loss evaluations.
    #[default]
    FiniteDifference,
    /// Exact reverse sweep through the evolution; stencil backend only.
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub fd_rel_step: f64,
    pub gradient: GradientMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            lr: 0.001,
            batch_size: None,
            fd_rel_step: DEFAULT_FD_REL_STEP,
            gradient: GradientMode::FiniteDifference,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.gradient == GradientMode::Reverse && !backprop::supports(model) {
            return Err(invalid("reverse-mode gradients need the stencil backend with a shared activation"));
        }
        if !(self.fd_rel_step > 0.0) {
            return Err(invalid("finite-difference step must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamVector,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamVector, seed: u64) -> Self {
        Self {
            params,
            adam: Adam::new(PARAM_COUNT),
            epoch: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the base batch losses seen during the epoch, before each update.
    pub loss: f64,
    pub min_batch_loss: f64,
    pub penalized_batches: usize,
    pub zeroed_components: usize,
}

/// Order of training images in a given epoch.
pub fn epoch_order(seed: u64, epoch: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// One pass over the training pairs with an Adam update per batch.
pub fn run_epoch(model: &ModelConfig, cfg: &TrainConfig, state: &mut TrainState, pairs: &[Pair]) -> Result<EpochStats> {
    cfg.validate(model)?;
    if pairs.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let batch_size = cfg.batch_size.unwrap_or(pairs.len()).min(pairs.len());
    let order = epoch_order(state.seed, state.epoch, pairs.len());
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut batches = 0;
    let mut penalized_batches = 0;
    let mut zeroed_components = 0;
    for chunk in order.chunks(batch_size) {
        let objective = BatchObjective {
            model,
            batch: chunk.iter().map(|&i| &pairs[i]).collect(),
        };
        let (base, grad, zeroed) = match cfg.gradient {
            GradientMode::FiniteDifference => {
                let base = objective.loss(&state.params);
                let grad = fd_gradient(&objective, &state.params, cfg.fd_rel_step);
                (base, grad.values, grad.zeroed.len())
            }
            GradientMode::Reverse => {
                let (base, grad) = backprop::loss_and_gradient(model, &state.params, &objective.batch)?;
                if base.penalized {
                    log::warn!("forward pass blew up; gradient zeroed for this batch");
                }
                (base, grad, if base.penalized { PARAM_COUNT } else { 0 })
            }
        };
        state.adam.step(&mut state.params.raw, &grad, cfg.lr);
        sum += base.value;
        min = min.min(base.value);
        batches += 1;
        penalized_batches += base.penalized as usize;
        zeroed_components += zeroed;
    }
    state.epoch += 1;
    let stats = EpochStats {
        epoch: state.epoch,
        loss: sum / batches as f64,
        min_batch_loss: min,
        penalized_batches,
        zeroed_components,
    };
    log::info!(
        "epoch {} loss {:.6} ({})",
        stats.epoch,
        stats.loss,
        state.params.describe()
    );
    Ok(stats)
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each one.
pub fn train<F>(model: &ModelConfig, cfg: &TrainConfig, state: &mut TrainState, pairs: &[Pair], mut on_epoch: F) -> Result<Vec<EpochStats>>
where
    F: FnMut(&TrainState, &EpochStats),
{
    cfg.validate(model)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let stats = run_epoch(model, cfg, state, pairs)?;
        on_epoch(state, &stats);
        log.push(stats);
    }
    Ok(log)
}
