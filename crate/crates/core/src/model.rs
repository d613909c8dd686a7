//! The ten-parameter multiscale denoising models.
//!
//! A model is a multiscale block with smoothed gradients on eight scales,
//! applied for a fixed number of explicit steps with shared parameters. The
//! trainable parameters are the time step `tau`, the contrast `lambda` and the
//! per-scale operator weights `beta_1..beta_8`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::{evolve, Backend, BlockConfig, TensorSharing};
use crate::error::{invalid, Result};
use crate::flux::{CouplingMode, Diffusivity};
use crate::grid::ImageGrid;
use crate::operators::OperatorSpec;

pub const SCALE_COUNT: usize = 8;
pub const PARAM_COUNT: usize = 2 + SCALE_COUNT;
pub const DEFAULT_STEPS: usize = 10;

/// Grey-value unit of the decoded contrast parameter.
pub const LAMBDA_UNIT: f64 = 10.0;

pub const INIT_TAU: f64 = 0.1;
pub const INIT_LAMBDA: f64 = 30.0;
pub const INIT_BETA: f64 = 1.0;

/// `count` scales `min * (max / min)^(k / count)`, `k = 0..count`.
pub fn exponential_scales(min: f64, max: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| min * libm::pow(max / min, k as f64 / count as f64))
        .collect()
}

/// The eight scales between 0.1 and 10: `0.1, 0.18, 0.32, ..., 5.62`.
pub fn default_scales() -> Vec<f64> {
    exponential_scales(0.1, 10.0, SCALE_COUNT)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    // log(e^y - 1), rearranged to stay accurate for large y
    y + libm::log1p(-libm::exp(-y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Diffusivity applied per derivative direction.
    UncoupledIso,
    /// Scalar diffusivity of the multiscale gradient magnitude.
    CoupledIso,
    /// Matrix diffusivity of the multiscale structure tensor.
    CoupledAniso,
}

impl ModelVariant {
    pub fn coupling(self) -> CouplingMode {
        match self {
            Self::UncoupledIso => CouplingMode::Uncoupled,
            Self::CoupledIso => CouplingMode::CoupledScalar,
            Self::CoupledAniso => CouplingMode::CoupledTensor,
        }
    }

    /// Short name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::UncoupledIso => "uncoupled",
            Self::CoupledIso => "iso",
            Self::CoupledAniso => "aniso",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uncoupled" => Some(Self::UncoupledIso),
            "iso" => Some(Self::CoupledIso),
            "aniso" => Some(Self::CoupledAniso),
            _ => None,
        }
    }
}

/// Raw, unconstrained parameters: `[tau_raw, lambda_raw, beta_1..beta_8]`.
///
/// `tau = softplus(tau_raw)`, `lambda = LAMBDA_UNIT * softplus(lambda_raw)`,
/// and the betas are used as they are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector {
    pub raw: [f64; PARAM_COUNT],
}

impl ParamVector {
    pub fn from_decoded(tau: f64, lambda: f64, betas: &[f64; SCALE_COUNT]) -> Result<Self> {
        if !(tau > 0.0 && lambda > 0.0) {
            return Err(invalid(format!("tau and lambda must be positive, got {tau}, {lambda}")));
        }
        let mut raw = [0.0; PARAM_COUNT];
        raw[0] = softplus_inverse(tau);
        raw[1] = softplus_inverse(lambda / LAMBDA_UNIT);
        raw[2..].copy_from_slice(betas);
        Ok(Self { raw })
    }

    /// `tau = 0.1`, `lambda = 30`, `beta = 1`.
    pub fn initial() -> Self {
        Self::from_decoded(INIT_TAU, INIT_LAMBDA, &[INIT_BETA; SCALE_COUNT]).expect("initial values are positive")
    }

    pub fn tau(&self) -> f64 {
        softplus(self.raw[0])
    }

    pub fn lambda(&self) -> f64 {
        LAMBDA_UNIT * softplus(self.raw[1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.raw[2..]
    }

    pub fn describe(&self) -> String {
        format!("tau={:.6} lambda={:.4} beta={:?}", self.tau(), self.lambda(), self.betas())
    }
}

/// Fixed (non-trained) structure of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub backend: Backend,
    pub steps: usize,
    pub sharing: TensorSharing,
    operator: OperatorSpec,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, backend: Backend) -> Result<Self> {
        Self::with_scales(variant, backend, &default_scales(), DEFAULT_STEPS)
    }

    pub fn with_scales(variant: ModelVariant, backend: Backend, sigmas: &[f64], steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("a model needs at least one step"));
        }
        let ones: Vec<f64> = sigmas.iter().map(|_| 1.0).collect();
        let operator = OperatorSpec::multiscale_gradient(sigmas, &ones)?;
        // validates the backend parameters
        BlockConfig::new(operator.clone(), Diffusivity::exponential(1.0)?, variant.coupling(), 1.0)?
            .with_backend(backend)?;
        Ok(Self {
            variant,
            backend,
            steps,
            sharing: TensorSharing::Shared,
            operator,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        self.operator.sigmas()
    }

    /// The block configuration for a parameter vector.
    pub fn block_config(&self, params: &ParamVector) -> Result<BlockConfig> {
        if params.betas().len() != self.operator.sigmas().len() {
            return Err(invalid("parameter vector does not match the scale count"));
        }
        let operator = self.operator.with_betas(params.betas())?;
        let cfg = BlockConfig::new(operator, Diffusivity::exponential(params.lambda())?, self.variant.coupling(), params.tau())?
            .with_backend(self.backend)?
            .with_sharing(self.sharing);
        Ok(cfg)
    }

    /// Runs the full evolution: the forward pass used for training and evaluation alike.
    pub fn denoise(&self, params: &ParamVector, noisy: &ImageGrid) -> Result<ImageGrid> {
        let cfg = self.block_config(params)?;
        evolve(&cfg, noisy, self.steps)
    }

    /// Canonical one-line description, used for config hashing.
    pub fn canonical(&self) -> String {
        let backend = match self.backend {
            Backend::AdjointComposition => String::from("adjoint"),
            Backend::Stencil { alpha, gamma } => format!("stencil alpha={alpha} gamma={gamma}"),
        };
        format!(
            "variant={} backend={} steps={} sharing={:?} sigmas={:?}",
            self.variant.name(),
            backend,
            self.steps,
            self.sharing,
            self.sigmas()
        )
    }
}
