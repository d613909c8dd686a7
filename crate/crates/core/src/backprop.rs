//! Reverse-mode gradient of the training loss for stencil-backend models.
//!
//! The trajectory is produced by [`diffusion_step`], the same step used by
//! [`evolve`](crate::blocks::evolve); the backward sweep recomputes the
//! intermediates of each step from its stored input.

use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::{diffusion_step, Backend, BlockConfig, TensorSharing};
use crate::dataset::{mse, Pair};
use crate::error::{invalid, Error, Result};
use crate::flux::{matrix_diffusivity, CouplingMode, Sym2, SymMatrix2Field};
use crate::grid::{central_diff_x, central_diff_x_adjoint, central_diff_y, central_diff_y_adjoint, dot, ImageGrid};
use crate::model::{ModelConfig, ParamVector, LAMBDA_UNIT, PARAM_COUNT, SCALE_COUNT};
use crate::stencil::{EdgeGradient, StencilWeights};
use crate::trainer::{LossValue, PENALTY_LOSS};

/// Gradient with respect to the decoded parameters `tau`, `lambda`, `beta`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Decoded {
    tau: f64,
    lambda: f64,
    beta: [f64; SCALE_COUNT],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Whether [`loss_and_gradient`] supports the model.
pub fn supports(model: &ModelConfig) -> bool {
    matches!(model.backend, Backend::Stencil { .. }) && model.sharing == TensorSharing::Shared && model.sigmas().len() == SCALE_COUNT
}

/// Batch loss and its exact gradient with respect to the raw parameters.
///
/// When any image blows up the penalty loss is returned with a zero gradient.
pub fn loss_and_gradient(model: &ModelConfig, params: &ParamVector, batch: &[&Pair]) -> Result<(LossValue, [f64; PARAM_COUNT])> {
    if !supports(model) {
        return Err(invalid("reverse-mode gradients need the stencil backend with a shared activation"));
    }
    if batch.is_empty() {
        return Err(invalid("loss needs a non-empty batch"));
    }
    let cfg = model.block_config(params)?;
    let mut total = 0.0;
    let mut grad = Decoded::default();
    for pair in batch {
        let mut trajectory = Vec::with_capacity(model.steps + 1);
        trajectory.push(pair.noisy.clone());
        for _ in 0..model.steps {
            match diffusion_step(&cfg, trajectory.last().unwrap()) {
                Ok(next) => trajectory.push(next),
                Err(Error::Blowup { .. }) | Err(Error::NumericalDomain { .. }) => {
                    let penalty = LossValue {
                        value: PENALTY_LOSS,
                        penalized: true,
                    };
                    return Ok((penalty, [0.0; PARAM_COUNT]));
                }
                Err(e) => return Err(e),
            }
        }
        let out = trajectory.pop().unwrap();
        total += mse(&out, &pair.clean)?;
        let n = out.len() as f64;
        let mut ubar: Vec<f64> = out.values().iter().zip(pair.clean.values()).map(|(u, c)| 2.0 * (u - c) / n).collect();
        for u in trajectory.iter().rev() {
            ubar = step_backward(&cfg, u, &ubar, &mut grad)?;
        }
    }
    let b = batch.len() as f64;
    let mut raw = [0.0; PARAM_COUNT];
    raw[0] = grad.tau / b * sigmoid(params.raw[0]);
    raw[1] = grad.lambda / b * LAMBDA_UNIT * sigmoid(params.raw[1]);
    for l in 0..SCALE_COUNT {
        raw[2 + l] = grad.beta[l] / b;
    }
    let loss = LossValue {
        value: total / b,
        penalized: false,
    };
    Ok((loss, raw))
}

/// Per-step quantities the activation backward pass needs.
enum Saved {
    Scalar { arg: Vec<f64> },
    Diagonal { sx: Vec<f64>, sy: Vec<f64> },
    Tensor { structure: SymMatrix2Field },
}

/// Propagates `ubar_next = dL/du'` through `u' = u + tau sum_l omega_l beta_l^2
/// G_l A(D) G_l u` and returns `dL/du`, accumulating parameter sensitivities.
fn step_backward(cfg: &BlockConfig, u: &ImageGrid, ubar_next: &[f64], grad: &mut Decoded) -> Result<Vec<f64>> {
    let Backend::Stencil { alpha, gamma } = cfg.backend() else {
        return Err(invalid("reverse-mode gradients need the stencil backend"));
    };
    let op = cfg.operator();
    let kernels = op.kernels();
    let betas = op.betas();
    let omegas = cfg.scale_weights();
    let d = *cfg.diffusivity();
    let tau = cfg.tau();
    let (w, h) = (u.width(), u.height());
    let n = w * h;

    // forward recomputation
    let smoothed: Vec<ImageGrid> = kernels.iter().map(|k| k.apply(u)).collect();
    let dx: Vec<ImageGrid> = smoothed.iter().map(central_diff_x).collect();
    let dy: Vec<ImageGrid> = smoothed.iter().map(central_diff_y).collect();
    let gx = |l: usize, i: usize| betas[l] * dx[l].values()[i];
    let gy = |l: usize, i: usize| betas[l] * dy[l].values()[i];

    let (tensor, saved) = match cfg.coupling() {
        CouplingMode::CoupledScalar => {
            let mut arg = vec![0.0; n];
            for l in 0..kernels.len() {
                for (i, s) in arg.iter_mut().enumerate() {
                    let (x, y) = (gx(l, i), gy(l, i));
                    *s += omegas[l] * (x * x + y * y);
                }
            }
            let t = SymMatrix2Field::from_fn(w, h, |x, y| {
                let g = d.g(arg[y * w + x]);
                Sym2::new(g, 0.0, g)
            });
            (t, Saved::Scalar { arg })
        }
        CouplingMode::Uncoupled => {
            let (mut sx, mut sy) = (vec![0.0; n], vec![0.0; n]);
            for l in 0..kernels.len() {
                for i in 0..n {
                    let (x, y) = (gx(l, i), gy(l, i));
                    sx[i] += omegas[l] * x * x;
                    sy[i] += omegas[l] * y * y;
                }
            }
            let t = SymMatrix2Field::from_fn(w, h, |x, y| Sym2::new(d.g(sx[y * w + x]), 0.0, d.g(sy[y * w + x])));
            (t, Saved::Diagonal { sx, sy })
        }
        CouplingMode::CoupledTensor => {
            let mut st = SymMatrix2Field::zeros(w, h);
            for l in 0..kernels.len() {
                st.add_outer(omegas[l], &dx[l].scaled(betas[l]), &dy[l].scaled(betas[l]));
            }
            (matrix_diffusivity(&d, &st)?, Saved::Tensor { structure: st })
        }
    };
    let weights = StencilWeights::new(alpha, gamma, &tensor)?;

    // backward through the residual sum and the outer smoothing
    let upstream = ImageGrid::from_raw(w, h, ubar_next.to_vec());
    let mut ubar = ubar_next.to_vec();
    let mut edges = EdgeGradient::zeros(n);
    let mut gxbar: Vec<Vec<f64>> = Vec::with_capacity(kernels.len());
    let mut vbar: Vec<ImageGrid> = Vec::with_capacity(kernels.len());
    let smoothed_upstream: Vec<ImageGrid> = kernels.iter().map(|k| k.apply(&upstream)).collect();
    for l in 0..kernels.len() {
        let c = omegas[l] * betas[l] * betas[l];
        let div = weights.apply_unchecked(&smoothed[l]);
        // <ubar', G div> = <G ubar', div>
        let inner = dot(smoothed_upstream[l].values(), div.values());
        grad.tau += c * inner;
        grad.beta[l] += tau * inner * 2.0 * omegas[l] * betas[l];
        let div_bar = smoothed_upstream[l].scaled(tau * c);
        edges.accumulate(w, h, smoothed[l].values(), div_bar.values());
        vbar.push(weights.apply_unchecked(&div_bar));
    }
    drop(smoothed_upstream);

    // backward through the stencil weights and the activation
    let (ta, tb, tc) = edges.tensor_gradient(alpha, gamma, &tensor);
    let mut gybar: Vec<Vec<f64>> = Vec::with_capacity(kernels.len());
    match saved {
        Saved::Scalar { arg } => {
            let mut sbar = vec![0.0; n];
            for i in 0..n {
                let gbar = ta[i] + tc[i];
                sbar[i] = gbar * d.dg_ds2(arg[i]);
                grad.lambda += gbar * d.dg_dlambda(arg[i]);
            }
            for l in 0..kernels.len() {
                gxbar.push((0..n).map(|i| 2.0 * omegas[l] * sbar[i] * gx(l, i)).collect());
                gybar.push((0..n).map(|i| 2.0 * omegas[l] * sbar[i] * gy(l, i)).collect());
            }
        }
        Saved::Diagonal { sx, sy } => {
            let mut sxbar = vec![0.0; n];
            let mut sybar = vec![0.0; n];
            for i in 0..n {
                sxbar[i] = ta[i] * d.dg_ds2(sx[i]);
                sybar[i] = tc[i] * d.dg_ds2(sy[i]);
                grad.lambda += ta[i] * d.dg_dlambda(sx[i]) + tc[i] * d.dg_dlambda(sy[i]);
            }
            for l in 0..kernels.len() {
                gxbar.push((0..n).map(|i| 2.0 * omegas[l] * sxbar[i] * gx(l, i)).collect());
                gybar.push((0..n).map(|i| 2.0 * omegas[l] * sybar[i] * gy(l, i)).collect());
            }
        }
        Saved::Tensor { structure } => {
            let (mut ja, mut jb, mut jc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    // sensitivity as a symmetric matrix: the off-diagonal plane appears twice
                    let mbar = Sym2::new(ta[i], 0.5 * tb[i], tc[i]);
                    let (jbar, lbar) = matrix_function_backward(&d, &structure.get(x, y), &mbar);
                    ja[i] = jbar.a;
                    jb[i] = 2.0 * jbar.b;
                    jc[i] = jbar.c;
                    grad.lambda += lbar;
                }
            }
            for l in 0..kernels.len() {
                let o = omegas[l];
                gxbar.push((0..n).map(|i| o * (2.0 * ja[i] * gx(l, i) + jb[i] * gy(l, i))).collect());
                gybar.push((0..n).map(|i| o * (jb[i] * gx(l, i) + 2.0 * jc[i] * gy(l, i))).collect());
            }
        }
    }

    // backward through the scaled derivatives and the inner smoothing
    for l in 0..kernels.len() {
        grad.beta[l] += dot(&gxbar[l], dx[l].values()) + dot(&gybar[l], dy[l].values());
        let bx = central_diff_x_adjoint(&ImageGrid::from_raw(w, h, core::mem::take(&mut gxbar[l])));
        let by = central_diff_y_adjoint(&ImageGrid::from_raw(w, h, core::mem::take(&mut gybar[l])));
        let mut v = vbar[l].clone();
        v.add_scaled(betas[l], &bx);
        v.add_scaled(betas[l], &by);
        let back = kernels[l].apply(&v);
        for (a, b) in ubar.iter_mut().zip(back.values()) {
            *a += b;
        }
    }
    Ok(ubar)
}

/// Pulls a sensitivity `mbar` of `F = g(J)` back onto `J`, and returns it
/// together with the sensitivity with respect to the contrast parameter.
fn matrix_function_backward(d: &crate::flux::Diffusivity, j: &Sym2, mbar: &Sym2) -> (Sym2, f64) {
    let e = j.eigen();
    let n1 = e.nu1.max(0.0);
    if e.degenerate {
        let dg = d.dg_ds2(n1);
        let jbar = Sym2::new(dg * mbar.a, dg * mbar.b, dg * mbar.c);
        return (jbar, mbar.trace() * d.dg_dlambda(n1));
    }
    let n2 = e.nu2.max(0.0);
    let (v1x, v1y) = e.v1;
    let (v2x, v2y) = (-v1y, v1x);
    // components of mbar in the eigenbasis
    let (m1x, m1y) = mbar.mul_vec(v1x, v1y);
    let (m2x, m2y) = mbar.mul_vec(v2x, v2y);
    let p11 = v1x * m1x + v1y * m1y;
    let p22 = v2x * m2x + v2y * m2y;
    let p12 = v1x * m2x + v1y * m2y;
    let l11 = d.dg_ds2(n1);
    let l22 = d.dg_ds2(n2);
    let l12 = (d.g(n1) - d.g(n2)) / (e.nu1 - e.nu2);
    let (q11, q22, q12) = (p11 * l11, p22 * l22, p12 * l12);
    // V Q V^T
    let jbar = Sym2::new(
        q11 * v1x * v1x + 2.0 * q12 * v1x * v2x + q22 * v2x * v2x,
        q11 * v1x * v1y + q12 * (v1x * v2y + v2x * v1y) + q22 * v2x * v2y,
        q11 * v1y * v1y + 2.0 * q12 * v1y * v2y + q22 * v2y * v2y,
    );
    (jbar, p11 * d.dg_dlambda(n1) + p22 * d.dg_dlambda(n2))
}
