//! Plain-text `key=value` checkpoints.
//!
//! Floats are written in their shortest round-trip form, so a reloaded state
//! continues training bit-identically. The `config_hash` line covers the model
//! structure and every training setting except the epoch budget, which may be
//! raised when resuming.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rotdiff_core::adam::Adam;
use rotdiff_core::blocks::Backend;
use rotdiff_core::model::{ModelConfig, ModelVariant, ParamVector, PARAM_COUNT};
use rotdiff_core::trainer::{GradientMode, TrainConfig, TrainState};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::manifest::hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    /// Plan hash of the dataset the parameters were trained on.
    pub data_hash: String,
}

pub fn backend_name(backend: Backend) -> &'static str {
    match backend {
        Backend::AdjointComposition => "adjoint",
        Backend::Stencil { .. } => "stencil",
    }
}

pub fn gradient_name(mode: GradientMode) -> &'static str {
    match mode {
        GradientMode::FiniteDifference => "fd",
        GradientMode::Reverse => "reverse",
    }
}

pub fn gradient_from_name(name: &str) -> Option<GradientMode> {
    match name {
        "fd" => Some(GradientMode::FiniteDifference),
        "reverse" => Some(GradientMode::Reverse),
        _ => None,
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Hash of everything that determines a training trajectory apart from its length.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = format!(
        "{} lr={} batch={:?} gradient={} fd_rel_step={} seed={}",
        model.canonical(),
        train.lr,
        train.batch_size,
        gradient_name(train.gradient),
        train.fd_rel_step,
        train.seed
    );
    hex(&Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model, &self.train)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("format", FORMAT_VERSION.to_string());
        kv("variant", self.model.variant.name().into());
        kv("backend", backend_name(self.model.backend).into());
        if let Backend::Stencil { alpha, gamma } = self.model.backend {
            kv("alpha", alpha.to_string());
            kv("gamma", gamma.to_string());
        }
        kv("steps", self.model.steps.to_string());
        kv("sigmas", join(self.model.sigmas()));
        kv("epochs", self.train.epochs.to_string());
        kv("lr", self.train.lr.to_string());
        kv(
            "batch_size",
            self.train.batch_size.map_or_else(|| "full".into(), |b| b.to_string()),
        );
        kv("gradient", gradient_name(self.train.gradient).into());
        kv("fd_rel_step", self.train.fd_rel_step.to_string());
        kv("seed", self.state.seed.to_string());
        kv("epoch", self.state.epoch.to_string());
        kv("params", join(&self.state.params.raw));
        kv("adam_m", join(&self.state.adam.m));
        kv("adam_v", join(&self.state.adam.v));
        kv("adam_t", self.state.adam.t.to_string());
        kv("data_hash", self.data_hash.clone());
        kv("config_hash", self.config_hash());
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| format!("missing key `{k}`"));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value for `{k}`: `{v}`"))
        }
        let list = |k: &str| -> Result<Vec<f64>, String> { get(k)?.split(',').map(|v| num(k, v)).collect() };
        let fixed = |k: &str| -> Result<[f64; PARAM_COUNT], String> {
            list(k)?
                .try_into()
                .map_err(|_| format!("`{k}` needs {PARAM_COUNT} values"))
        };

        let version: u32 = num("format", get("format")?)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint format {version}"));
        }
        let variant = ModelVariant::from_name(get("variant")?).ok_or("unknown model variant")?;
        let backend = match get("backend")? {
            "adjoint" => Backend::AdjointComposition,
            "stencil" => Backend::Stencil {
                alpha: num("alpha", get("alpha")?)?,
                gamma: num("gamma", get("gamma")?)?,
            },
            other => return Err(format!("unknown backend `{other}`")),
        };
        let model = ModelConfig::with_scales(variant, backend, &list("sigmas")?, num("steps", get("steps")?)?)
            .map_err(|e| e.to_string())?;
        let batch_size = match get("batch_size")? {
            "full" => None,
            v => Some(num("batch_size", v)?),
        };
        let train = TrainConfig {
            epochs: num("epochs", get("epochs")?)?,
            lr: num("lr", get("lr")?)?,
            batch_size,
            fd_rel_step: num("fd_rel_step", get("fd_rel_step")?)?,
            gradient: gradient_from_name(get("gradient")?).ok_or("unknown gradient mode")?,
            seed: num("seed", get("seed")?)?,
        };
        let mut adam = Adam::new(PARAM_COUNT);
        adam.m = fixed("adam_m")?.to_vec();
        adam.v = fixed("adam_v")?.to_vec();
        adam.t = num("adam_t", get("adam_t")?)?;
        let state = TrainState {
            params: ParamVector { raw: fixed("params")? },
            adam,
            epoch: num("epoch", get("epoch")?)?,
            seed: train.seed,
        };
        let ckpt = Self {
            model,
            train,
            state,
            data_hash: get("data_hash")?.to_string(),
        };
        if get("config_hash")? != ckpt.config_hash() {
            return Err("config hash does not match the stored settings".into());
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|m| CliError::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = ModelConfig::new(ModelVariant::CoupledAniso, Backend::Stencil { alpha: 0.41, gamma: 0.0 }).unwrap();
        let train = TrainConfig {
            epochs: 3,
            batch_size: Some(4),
            gradient: GradientMode::Reverse,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(ParamVector::initial(), 11);
        let grad: Vec<f64> = (0..PARAM_COUNT).map(|i| (i as f64 - 4.3) / 7.0).collect();
        state.adam.step(&mut state.params.raw, &grad, 0.001);
        state.epoch = 1;
        Checkpoint {
            model,
            train,
            state,
            data_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.state.params.raw.iter().zip(&c.state.params.raw) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adjoint_backend_round_trip() {
        let mut c = sample();
        c.model = ModelConfig::new(ModelVariant::UncoupledIso, Backend::AdjointComposition).unwrap();
        c.train.gradient = GradientMode::FiniteDifference;
        c.train.batch_size = None;
        assert_eq!(Checkpoint::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn tampered_settings_are_rejected() {
        let text = sample().to_text().replace("lr=0.001", "lr=0.01");
        assert!(Checkpoint::parse(&text).unwrap_err().contains("config hash"));
    }

    #[test]
    fn epoch_budget_is_outside_the_hash() {
        let mut c = sample();
        let h = c.config_hash();
        c.train.epochs = 100;
        assert_eq!(c.config_hash(), h);
        c.train.seed = 12;
        assert_ne!(c.config_hash(), h);
    }

    #[test]
    fn missing_keys_are_named() {
        let text: String = sample().to_text().lines().filter(|l| !l.starts_with("adam_v")).map(|l| format!("{l}\n")).collect();
        assert!(Checkpoint::parse(&text).unwrap_err().contains("adam_v"));
    }
}
