//! Explicit diffusion blocks.
//!
//! One step is `u - tau * sum_l omega_l K_l^T Phi(u, K_l u)`. With a single
//! operator and `omega = 1` this is the plain diffusion block; with several
//! smoothed-gradient scales it is the fully coupled multiscale block, where
//! one activation (scalar or tensor) is shared by every scale path. Several
//! image channels share the activation argument as well.
//!
//! Two backends evaluate `K^T Phi(K u)`:
//! * [`Backend::AdjointComposition`] literally composes `apply_operator`, the
//!   flux and `apply_adjoint`;
//! * [`Backend::Stencil`] evaluates the divergence term of each scale with the
//!   3x3 `(alpha, gamma)` stencil, sandwiched between the scale's Gaussian:
//!   `K_l^T (D K_l u) ~ -beta_l^2 G_l div(D grad(G_l u))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::flux::{accumulate_squares, apply_tensor, matrix_diffusivity, CouplingMode, Diffusivity, SymMatrix2Field};
use crate::grid::{central_diff_x, central_diff_y, ImageGrid};
use crate::operators::{apply_adjoint, apply_operator, OperatorKind, OperatorResponse, OperatorSpec};
use crate::stencil::{check_stencil_params, StencilWeights};

/// Updates larger than this (or non-finite) abort the evolution.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    AdjointComposition,
    Stencil { alpha: f64, gamma: f64 },
}

/// Whether the multiscale activation builds one tensor from all scales or
/// one per scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TensorSharing {
    #[default]
    Shared,
    PerScale,
}

/// `omega_l = sigma_{l+1} - sigma_l`; the last scale repeats the previous gap.
pub fn default_scale_weights(sigmas: &[f64]) -> Vec<f64> {
    match sigmas.len() {
        0 => Vec::new(),
        1 => vec![1.0],
        n => {
            let mut w: Vec<f64> = sigmas.windows(2).map(|p| p[1] - p[0]).collect();
            w.push(sigmas[n - 1] - sigmas[n - 2]);
            w
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    operator: OperatorSpec,
    diffusivity: Diffusivity,
    coupling: CouplingMode,
    tau: f64,
    scale_weights: Vec<f64>,
    backend: Backend,
    sharing: TensorSharing,
}

impl BlockConfig {
    /// Adjoint-composition block with the default scale weights.
    pub fn new(operator: OperatorSpec, diffusivity: Diffusivity, coupling: CouplingMode, tau: f64) -> Result<Self> {
        let scale_weights = match operator.kind() {
            OperatorKind::MultiscaleGradient => default_scale_weights(operator.sigmas()),
            _ => vec![1.0],
        };
        Self::weighted(operator, diffusivity, coupling, tau, scale_weights)
    }

    /// Adjoint-composition block with explicit scale weights `omega_l`.
    pub fn weighted(
        operator: OperatorSpec,
        diffusivity: Diffusivity,
        coupling: CouplingMode,
        tau: f64,
        scale_weights: Vec<f64>,
    ) -> Result<Self> {
        let cfg = Self {
            operator,
            diffusivity,
            coupling,
            tau,
            scale_weights,
            backend: Backend::AdjointComposition,
            sharing: TensorSharing::Shared,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_backend(mut self, backend: Backend) -> Result<Self> {
        self.backend = backend;
        self.validate()?;
        Ok(self)
    }

    pub fn with_scale_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.scale_weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn with_sharing(mut self, sharing: TensorSharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.tau = tau;
        self.validate()?;
        Ok(self)
    }

    pub fn with_diffusivity(mut self, diffusivity: Diffusivity) -> Self {
        self.diffusivity = diffusivity;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(invalid(format!("time step must be positive, got {}", self.tau)));
        }
        if self.scale_weights.len() != self.operator.scale_count() {
            return Err(invalid(format!(
                "{} scale weights for {} scales",
                self.scale_weights.len(),
                self.operator.scale_count()
            )));
        }
        if self.scale_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("scale weights must be positive"));
        }
        let gradient_like = self.operator.is_gradient_like();
        if self.coupling != CouplingMode::CoupledScalar && !gradient_like {
            return Err(invalid(format!(
                "{:?} coupling needs a gradient-like operator, got {:?}",
                self.coupling,
                self.operator.kind()
            )));
        }
        if let Backend::Stencil { alpha, gamma } = self.backend {
            check_stencil_params(alpha, gamma)?;
            if !gradient_like {
                return Err(invalid("the stencil backend needs a gradient-like operator"));
            }
        }
        Ok(())
    }

    pub fn operator(&self) -> &OperatorSpec {
        &self.operator
    }

    pub fn diffusivity(&self) -> &Diffusivity {
        &self.diffusivity
    }

    pub fn coupling(&self) -> CouplingMode {
        self.coupling
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn scale_weights(&self) -> &[f64] {
        &self.scale_weights
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn sharing(&self) -> TensorSharing {
        self.sharing
    }

    /// Discrete energy `sum_x Psi(arg(x))`, where `arg` is the coupled
    /// argument of the scalar activation (the trace of the structure tensor).
    pub fn energy(&self, u: &ImageGrid) -> f64 {
        let resp = apply_operator(&self.operator, u);
        let mut arg = u.zeros_like();
        accumulate_squares(&mut arg, &resp, &self.scale_weights);
        arg.values().iter().map(|&s| self.diffusivity.potential(s)).sum()
    }
}

/// Activation argument or tensor, per scale (length 1 when shared).
enum Activation {
    Scalar(Vec<ImageGrid>),
    Diagonal(Vec<(ImageGrid, ImageGrid)>),
    Tensor(Vec<SymMatrix2Field>),
}

impl Activation {
    fn index(&self, l: usize) -> usize {
        let n = match self {
            Self::Scalar(v) => v.len(),
            Self::Diagonal(v) => v.len(),
            Self::Tensor(v) => v.len(),
        };
        if n == 1 {
            0
        } else {
            l
        }
    }
}

/// Accumulates the activation over image channels and scales. `grads[m][l]`
/// is the `(gx, gy)` pair (already scaled by `beta_l`) of channel `m`, scale `l`.
fn gradient_activation(cfg: &BlockConfig, grads: &[Vec<(ImageGrid, ImageGrid)>]) -> Result<Activation> {
    let first = &grads[0][0].0;
    let (w, h) = (first.width(), first.height());
    let scales = cfg.scale_weights.len();
    let per_scale = cfg.sharing == TensorSharing::PerScale && scales > 1;
    let slots = if per_scale { scales } else { 1 };
    // per-scale activations see their own scale unweighted
    let weight = |l: usize| if per_scale { 1.0 } else { cfg.scale_weights[l] };
    let slot = |l: usize| if per_scale { l } else { 0 };
    let d = cfg.diffusivity;

    Ok(match cfg.coupling {
        CouplingMode::CoupledScalar => {
            let mut args = vec![first.zeros_like(); slots];
            for channel in grads {
                for (l, (gx, gy)) in channel.iter().enumerate() {
                    let wl = weight(l);
                    let acc = args[slot(l)].values_mut();
                    for ((s, x), y) in acc.iter_mut().zip(gx.values()).zip(gy.values()) {
                        *s += wl * (x * x + y * y);
                    }
                }
            }
            Activation::Scalar(args.into_iter().map(|a| a.map(|s| d.g(s))).collect())
        }
        CouplingMode::Uncoupled => {
            let mut args = vec![(first.zeros_like(), first.zeros_like()); slots];
            for channel in grads {
                for (l, (gx, gy)) in channel.iter().enumerate() {
                    let wl = weight(l);
                    let (ax, ay) = &mut args[slot(l)];
                    for (s, x) in ax.values_mut().iter_mut().zip(gx.values()) {
                        *s += wl * x * x;
                    }
                    for (s, y) in ay.values_mut().iter_mut().zip(gy.values()) {
                        *s += wl * y * y;
                    }
                }
            }
            Activation::Diagonal(
                args.into_iter()
                    .map(|(ax, ay)| (ax.map(|s| d.g(s)), ay.map(|s| d.g(s))))
                    .collect(),
            )
        }
        CouplingMode::CoupledTensor => {
            let mut sts = vec![SymMatrix2Field::zeros(w, h); slots];
            for channel in grads {
                for (l, (gx, gy)) in channel.iter().enumerate() {
                    sts[slot(l)].add_outer(weight(l), gx, gy);
                }
            }
            Activation::Tensor(sts.iter().map(|st| matrix_diffusivity(&d, st)).collect::<Result<_>>()?)
        }
    })
}

fn multiply(a: &ImageGrid, b: &ImageGrid) -> ImageGrid {
    let v = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    ImageGrid::from_raw(a.width(), a.height(), v)
}

/// Flux of one gradient pair under the activation slot for scale `l`.
fn gradient_flux(act: &Activation, l: usize, gx: &ImageGrid, gy: &ImageGrid) -> (ImageGrid, ImageGrid) {
    match act {
        Activation::Scalar(g) => {
            let g = &g[act.index(l)];
            (multiply(g, gx), multiply(g, gy))
        }
        Activation::Diagonal(g) => {
            let (g1, g2) = &g[act.index(l)];
            (multiply(g1, gx), multiply(g2, gy))
        }
        Activation::Tensor(t) => {
            let pair = OperatorResponse::from_parts(
                vec![gx.clone(), gy.clone()],
                crate::operators::ChannelSemantics::Gradient2,
            );
            let out = apply_tensor(&t[act.index(l)], &pair).expect("tensor field matches response shape");
            let mut ch = out.into_channels();
            let fy = ch.pop().unwrap();
            let fx = ch.pop().unwrap();
            (fx, fy)
        }
    }
}

fn activation_tensor(act: &Activation, l: usize) -> SymMatrix2Field {
    match act {
        Activation::Scalar(g) => SymMatrix2Field::isotropic(&g[act.index(l)]),
        Activation::Diagonal(g) => {
            let (g1, g2) = &g[act.index(l)];
            SymMatrix2Field::from_fn(g1.width(), g1.height(), |x, y| crate::flux::Sym2::new(g1.get(x, y), 0.0, g2.get(x, y)))
        }
        Activation::Tensor(t) => t[act.index(l)].clone(),
    }
}

/// `sum_l omega_l K_l^T Phi_l` for every image channel, adjoint-composition backend.
fn divergence_adjoint(cfg: &BlockConfig, us: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
    let op = &cfg.operator;
    let responses: Vec<OperatorResponse> = us.iter().map(|u| apply_operator(op, u)).collect();

    if !op.is_gradient_like() {
        // scalar coupling over all operator channels and image channels
        let mut arg = us[0].zeros_like();
        for r in &responses {
            accumulate_squares(&mut arg, r, &cfg.scale_weights);
        }
        let omega = cfg.scale_weights[0];
        let g = arg.map(|s| cfg.diffusivity.g(s));
        return responses
            .iter()
            .map(|r| {
                let flux = r.map_channels(|ch| multiply(&g, ch).scaled(omega));
                apply_adjoint(op, &flux)
            })
            .collect();
    }

    let grads: Vec<Vec<(ImageGrid, ImageGrid)>> = responses
        .into_iter()
        .map(|r| {
            let mut ch = r.into_channels().into_iter();
            let mut pairs = Vec::new();
            while let (Some(gx), Some(gy)) = (ch.next(), ch.next()) {
                pairs.push((gx, gy));
            }
            pairs
        })
        .collect();
    let act = gradient_activation(cfg, &grads)?;
    let semantics = op.semantics();
    grads
        .iter()
        .map(|pairs| {
            let mut channels = Vec::with_capacity(2 * pairs.len());
            for (l, (gx, gy)) in pairs.iter().enumerate() {
                let (fx, fy) = gradient_flux(&act, l, gx, gy);
                let omega = cfg.scale_weights[l];
                channels.push(fx.scaled(omega));
                channels.push(fy.scaled(omega));
            }
            apply_adjoint(op, &OperatorResponse::from_parts(channels, semantics))
        })
        .collect()
}

/// `sum_l omega_l beta_l^2 G_l div(D grad(G_l u))` for every image channel.
fn divergence_stencil(cfg: &BlockConfig, us: &[ImageGrid], alpha: f64, gamma: f64) -> Result<Vec<ImageGrid>> {
    let op = &cfg.operator;
    let multiscale = matches!(op.kind(), OperatorKind::MultiscaleGradient);
    let scales = op.scale_count();

    // smoothed images per channel and scale
    let smoothed: Vec<Vec<ImageGrid>> = us
        .iter()
        .map(|u| {
            if multiscale {
                op.kernels().iter().map(|k| k.apply(u)).collect()
            } else {
                vec![u.clone()]
            }
        })
        .collect();
    let beta = |l: usize| if multiscale { op.betas()[l] } else { 1.0 };

    let grads: Vec<Vec<(ImageGrid, ImageGrid)>> = smoothed
        .iter()
        .map(|vs| {
            vs.iter()
                .enumerate()
                .map(|(l, v)| (central_diff_x(v).scaled(beta(l)), central_diff_y(v).scaled(beta(l))))
                .collect()
        })
        .collect();
    let act = gradient_activation(cfg, &grads)?;
    drop(grads);

    let shared = cfg.sharing == TensorSharing::Shared || scales == 1;
    let weights: Vec<StencilWeights> = if shared {
        vec![StencilWeights::new(alpha, gamma, &activation_tensor(&act, 0))?]
    } else {
        (0..scales)
            .map(|l| StencilWeights::new(alpha, gamma, &activation_tensor(&act, l)))
            .collect::<Result<_>>()?
    };

    Ok(smoothed
        .iter()
        .map(|vs| {
            let mut total = vs[0].zeros_like();
            for (l, v) in vs.iter().enumerate() {
                let sw = &weights[if shared { 0 } else { l }];
                let div = sw.apply_unchecked(v);
                let back = if multiscale { op.kernels()[l].apply(&div) } else { div };
                let b = beta(l);
                total.add_scaled(cfg.scale_weights[l] * b * b, &back);
            }
            total
        })
        .collect())
}

fn step_channels(cfg: &BlockConfig, us: &[ImageGrid], step: usize) -> Result<Vec<ImageGrid>> {
    if us.is_empty() {
        return Err(invalid("at least one image channel is required"));
    }
    if us.iter().any(|u| !u.same_shape(&us[0])) {
        return Err(invalid("image channels differ in shape"));
    }
    // both backends return the increment direction with the sign of -K^T Phi
    let increments = match cfg.backend {
        Backend::AdjointComposition => divergence_adjoint(cfg, us)?
            .into_iter()
            .map(|d| d.scaled(-1.0))
            .collect::<Vec<_>>(),
        Backend::Stencil { alpha, gamma } => divergence_stencil(cfg, us, alpha, gamma)?,
    };
    let mut max_update: f64 = 0.0;
    let mut finite = true;
    let out: Vec<ImageGrid> = us
        .iter()
        .zip(increments)
        .map(|(u, inc)| {
            let mut next = u.clone();
            for (n, d) in next.values_mut().iter_mut().zip(inc.values()) {
                let upd = cfg.tau * d;
                if !upd.is_finite() {
                    finite = false;
                }
                max_update = max_update.max(upd.abs());
                *n += upd;
            }
            next
        })
        .collect();
    if !finite || max_update > BLOWUP_THRESHOLD || out.iter().any(|u| !u.all_finite()) {
        return Err(Error::Blowup {
            step,
            max_update: if finite { max_update } else { f64::INFINITY },
        });
    }
    Ok(out)
}

/// One explicit step on a single image.
pub fn diffusion_step(cfg: &BlockConfig, u: &ImageGrid) -> Result<ImageGrid> {
    Ok(step_channels(cfg, core::slice::from_ref(u), 0)?.pop().unwrap())
}

/// One explicit step of the fully coupled multi-channel block: every image
/// channel contributes to one shared activation argument.
pub fn multichannel_step(cfg: &BlockConfig, us: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
    step_channels(cfg, us, 0)
}

/// Time level `k` of an evolution with shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionState {
    pub channels: Vec<ImageGrid>,
    pub step: usize,
}

impl EvolutionState {
    pub fn new(channels: Vec<ImageGrid>) -> Self {
        Self { channels, step: 0 }
    }

    pub fn advance(&mut self, cfg: &BlockConfig) -> Result<()> {
        self.channels = step_channels(cfg, &self.channels, self.step)?;
        self.step += 1;
        Ok(())
    }
}

/// Applies `steps` explicit steps with the same configuration.
pub fn evolve(cfg: &BlockConfig, u0: &ImageGrid, steps: usize) -> Result<ImageGrid> {
    if steps == 0 {
        return Err(invalid("evolution needs at least one step"));
    }
    let mut state = EvolutionState::new(vec![u0.clone()]);
    for _ in 0..steps {
        state.advance(cfg)?;
    }
    Ok(state.channels.pop().unwrap())
}

/// Stencil-backend step for a configuration whose backend is already
/// [`Backend::Stencil`].
pub fn diffusion_step_stencil(cfg: &BlockConfig, u: &ImageGrid) -> Result<ImageGrid> {
    match cfg.backend {
        Backend::Stencil { .. } => diffusion_step(cfg, u),
        Backend::AdjointComposition => Err(invalid("configuration does not use the stencil backend")),
    }
}
