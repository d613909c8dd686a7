//! Coupled activation functions.
//!
//! A flux function `Phi` maps an operator response `K u` to the vector field
//! that the adjoint `K^T` turns back into an image update. Coupling means the
//! nonlinearity sees a rotationally invariant combination of several channels
//! (a squared norm, or a structure tensor) instead of each channel alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::operators::OperatorResponse;

/// Scalar diffusivity `g(s^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusivity {
    /// `g(s^2) = exp(-s^2 / (2 lambda^2))`.
    ExponentialPM { lambda: f64 },
}

impl Diffusivity {
    pub fn exponential(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("contrast parameter must be positive, got {lambda}")));
        }
        Ok(Self::ExponentialPM { lambda })
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Self::ExponentialPM { lambda } => lambda,
        }
    }

    /// Checked evaluation; the argument is a squared quantity.
    pub fn eval(&self, s2: f64) -> Result<f64> {
        if !(s2 >= 0.0) {
            return Err(invalid(format!("diffusivity argument must be a non-negative square, got {s2}")));
        }
        Ok(self.g(s2))
    }

    #[inline]
    pub(crate) fn g(&self, s2: f64) -> f64 {
        match *self {
            Self::ExponentialPM { lambda } => libm::exp(-s2 / (2.0 * lambda * lambda)),
        }
    }

    /// `dg / d(s^2)`.
    #[inline]
    pub(crate) fn dg_ds2(&self, s2: f64) -> f64 {
        match *self {
            Self::ExponentialPM { lambda } => -self.g(s2) / (2.0 * lambda * lambda),
        }
    }

    /// `dg / d lambda` at fixed argument.
    #[inline]
    pub(crate) fn dg_dlambda(&self, s2: f64) -> f64 {
        match *self {
            Self::ExponentialPM { lambda } => self.g(s2) * s2 / (lambda * lambda * lambda),
        }
    }

    /// Energy density `Psi(s^2)` with `Psi' = g`, `Psi(0) = 0`.
    pub fn potential(&self, s2: f64) -> f64 {
        match *self {
            Self::ExponentialPM { lambda } => {
                let two_l2 = 2.0 * lambda * lambda;
                two_l2 * (1.0 - libm::exp(-s2 / two_l2))
            }
        }
    }
}

pub fn eval_diffusivity(d: &Diffusivity, s2: f64) -> Result<f64> {
    d.eval(s2)
}

/// How the activation combines channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Diffusivity applied to each derivative direction on its own.
    Uncoupled,
    /// Scalar diffusivity of the summed squared channels.
    CoupledScalar,
    /// Matrix diffusivity of the accumulated structure tensor.
    CoupledTensor,
}

/// A symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Spectral data of a [`Sym2`]: eigenvalues `nu1 >= nu2`, unit eigenvector of `nu1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen2 {
    pub nu1: f64,
    pub nu2: f64,
    pub v1: (f64, f64),
    pub degenerate: bool,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 { a: 1.0, b: 0.0, c: 1.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn mul_vec(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y, self.b * x + self.c * y)
    }

    /// `R M R^T` for the rotation by `theta` radians.
    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = libm::sincos(theta);
        // R M
        let m11 = c * self.a - s * self.b;
        let m12 = c * self.b - s * self.c;
        let m21 = s * self.a + c * self.b;
        let m22 = s * self.b + c * self.c;
        // (R M) R^T
        Self {
            a: m11 * c - m12 * s,
            b: m11 * s + m12 * c,
            c: m21 * s + m22 * c,
        }
    }

    pub fn is_psd(&self) -> bool {
        let scale = self.a + self.c + 1.0;
        let tol = 1e-9 * scale * scale;
        self.a >= -tol && self.c >= -tol && self.det() >= -tol
    }

    pub fn eigen(&self) -> Eigen2 {
        let mean = 0.5 * (self.a + self.c);
        let half_diff = 0.5 * (self.a - self.c);
        let radius = libm::hypot(half_diff, self.b);
        let nu1 = mean + radius;
        let nu2 = mean - radius;
        if 2.0 * radius <= 1e-12 * (nu1.abs() + 1.0) {
            return Eigen2 {
                nu1,
                nu2,
                v1: (1.0, 0.0),
                degenerate: true,
            };
        }
        // rows of M - nu1 I; the larger one, turned by 90 degrees, spans the eigenspace
        let r1 = (self.a - nu1, self.b);
        let r2 = (self.b, self.c - nu1);
        let row = if r1.0 * r1.0 + r1.1 * r1.1 >= r2.0 * r2.0 + r2.1 * r2.1 { r1 } else { r2 };
        let (vx, vy) = (-row.1, row.0);
        let norm = libm::hypot(vx, vy);
        Eigen2 {
            nu1,
            nu2,
            v1: (vx / norm, vy / norm),
            degenerate: false,
        }
    }

    /// `g(nu1) v1 v1^T + g(nu2) v2 v2^T`.
    pub fn matrix_function(&self, f: impl Fn(f64) -> f64) -> Self {
        let e = self.eigen();
        let g1 = f(e.nu1.max(0.0));
        if e.degenerate {
            return Self { a: g1, b: 0.0, c: g1 };
        }
        let g2 = f(e.nu2.max(0.0));
        let (vx, vy) = e.v1;
        let d = g1 - g2;
        Self {
            a: g2 + d * vx * vx,
            b: d * vx * vy,
            c: g2 + d * vy * vy,
        }
    }
}

/// Per-pixel symmetric 2x2 matrices, stored as three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix2Field {
    width: usize,
    height: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl SymMatrix2Field {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            a: vec![0.0; n],
            b: vec![0.0; n],
            c: vec![0.0; n],
        }
    }

    pub fn constant(width: usize, height: usize, m: Sym2) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            a: vec![m.a; n],
            b: vec![m.b; n],
            c: vec![m.c; n],
        }
    }

    /// Builds `g * I` from a scalar field.
    pub fn isotropic(g: &ImageGrid) -> Self {
        Self {
            width: g.width(),
            height: g.height(),
            a: g.values().to_vec(),
            b: vec![0.0; g.len()],
            c: g.values().to_vec(),
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Sym2) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                out.set(x, y, f(x, y));
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Sym2 {
        let i = y * self.width + x;
        Sym2 {
            a: self.a[i],
            b: self.b[i],
            c: self.c[i],
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, m: Sym2) {
        let i = y * self.width + x;
        self.a[i] = m.a;
        self.b[i] = m.b;
        self.c[i] = m.c;
    }

    pub(crate) fn planes(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.a, &self.b, &self.c)
    }

    /// Adds `weight * (gx, gy)(gx, gy)^T` at every pixel.
    pub fn add_outer(&mut self, weight: f64, gx: &ImageGrid, gy: &ImageGrid) {
        for (i, (&x, &y)) in gx.values().iter().zip(gy.values()).enumerate() {
            self.a[i] += weight * x * x;
            self.b[i] += weight * x * y;
            self.c[i] += weight * y * y;
        }
    }

    pub fn trace(&self) -> ImageGrid {
        let t = self.a.iter().zip(&self.c).map(|(a, c)| a + c).collect();
        ImageGrid::from_raw(self.width, self.height, t)
    }

    fn check_shape(&self, img: &ImageGrid) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(invalid(format!(
                "tensor field is {}x{} but response is {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

fn group_weights(resp: &OperatorResponse, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let groups = resp
        .semantics()
        .gradient_groups()
        .ok_or_else(|| invalid(format!("{:?} is not a gradient-like response", resp.semantics())))?;
    match weights {
        Some(w) if w.len() != groups => Err(invalid(format!("{groups} gradient groups but {} weights", w.len()))),
        Some(w) => Ok(w.to_vec()),
        None => Ok(vec![1.0; groups]),
    }
}

/// Adds `sum_c weight_group(c) * channel_c^2` into `acc`; channels are split
/// evenly into `weights.len()` consecutive groups.
pub(crate) fn accumulate_squares(acc: &mut ImageGrid, resp: &OperatorResponse, weights: &[f64]) {
    let per_group = resp.channels().len() / weights.len();
    let acc = acc.values_mut();
    for (c, ch) in resp.channels().iter().enumerate() {
        let w = weights[c / per_group];
        for (s, v) in acc.iter_mut().zip(ch.values()) {
            *s += w * v * v;
        }
    }
}

/// Multiplies every channel by `g(arg)` pixelwise.
pub fn scale_by_diffusivity(d: &Diffusivity, arg: &ImageGrid, resp: &OperatorResponse) -> OperatorResponse {
    let g = arg.map(|s| d.g(s));
    resp.map_channels(|ch| {
        let vals = ch.values().iter().zip(g.values()).map(|(v, gi)| gi * v).collect();
        ImageGrid::from_raw(ch.width(), ch.height(), vals)
    })
}

/// `g(|K u|^2) K u` with the squared norm taken over all channels.
pub fn coupled_scalar_flux(d: &Diffusivity, resp: &OperatorResponse) -> OperatorResponse {
    let mut arg = resp.channel(0).zeros_like();
    accumulate_squares(&mut arg, resp, &[1.0]);
    scale_by_diffusivity(d, &arg, resp)
}

/// Like [`coupled_scalar_flux`], but each gradient group `l` contributes
/// `weights[l] * |(gx_l, gy_l)|^2` to the shared argument.
pub fn coupled_scalar_flux_weighted(d: &Diffusivity, resp: &OperatorResponse, weights: &[f64]) -> Result<OperatorResponse> {
    let w = group_weights(resp, Some(weights))?;
    let mut arg = resp.channel(0).zeros_like();
    accumulate_squares(&mut arg, resp, &w);
    Ok(scale_by_diffusivity(d, &arg, resp))
}

/// `g(channel^2) * channel` independently for every channel.
pub fn uncoupled_flux(d: &Diffusivity, resp: &OperatorResponse) -> OperatorResponse {
    resp.map_channels(|ch| ch.map(|v| d.g(v * v) * v))
}

/// Structure tensor `sum_l w_l (gx_l, gy_l)(gx_l, gy_l)^T` of a gradient-like response.
pub fn accumulate_structure_tensor(resp: &OperatorResponse, weights: Option<&[f64]>) -> Result<SymMatrix2Field> {
    let w = group_weights(resp, weights)?;
    let mut st = SymMatrix2Field::zeros(resp.width(), resp.height());
    for (l, &wl) in w.iter().enumerate() {
        st.add_outer(wl, resp.channel(2 * l), resp.channel(2 * l + 1));
    }
    Ok(st)
}

/// Applies `g` to the eigenvalues of every matrix of the field.
pub fn matrix_diffusivity(d: &Diffusivity, m: &SymMatrix2Field) -> Result<SymMatrix2Field> {
    let mut out = SymMatrix2Field::zeros(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let s = m.get(x, y);
            if !s.is_psd() {
                return Err(Error::NumericalDomain {
                    x,
                    y,
                    reason: format!("matrix [[{}, {}], [{}, {}]] is not positive semi-definite", s.a, s.b, s.b, s.c),
                });
            }
            out.set(x, y, s.matrix_function(|nu| d.g(nu)));
        }
    }
    Ok(out)
}

/// Multiplies each gradient group of `resp` by the per-pixel tensor.
pub fn apply_tensor(tensor: &SymMatrix2Field, resp: &OperatorResponse) -> Result<OperatorResponse> {
    let groups = group_weights(resp, None)?.len();
    tensor.check_shape(resp.channel(0))?;
    let (a, b, c) = tensor.planes();
    let mut channels = Vec::with_capacity(2 * groups);
    for l in 0..groups {
        let gx = resp.channel(2 * l).values();
        let gy = resp.channel(2 * l + 1).values();
        let mut fx = Vec::with_capacity(gx.len());
        let mut fy = Vec::with_capacity(gx.len());
        for i in 0..gx.len() {
            fx.push(a[i] * gx[i] + b[i] * gy[i]);
            fy.push(b[i] * gx[i] + c[i] * gy[i]);
        }
        channels.push(ImageGrid::from_raw(resp.width(), resp.height(), fx));
        channels.push(ImageGrid::from_raw(resp.width(), resp.height(), fy));
    }
    Ok(OperatorResponse::from_parts(channels, resp.semantics()))
}

/// `Psi(st) (gx_l, gy_l)^T` for every group, one shared diffusion tensor.
pub fn coupled_tensor_flux(d: &Diffusivity, resp: &OperatorResponse, st: &SymMatrix2Field) -> Result<OperatorResponse> {
    group_weights(resp, None)?;
    st.check_shape(resp.channel(0))?;
    let tensor = matrix_diffusivity(d, st)?;
    apply_tensor(&tensor, resp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::ChannelSemantics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E_INV: f64 = 0.36787944117144233;

    fn single_pixel_response(values: &[f64], sem: ChannelSemantics) -> OperatorResponse {
        let ch = values.iter().map(|&v| ImageGrid::constant(3, 3, v).unwrap()).collect();
        OperatorResponse::new(ch, sem).unwrap()
    }

    fn lambda_for_two_l2(two_l2: f64) -> Diffusivity {
        Diffusivity::exponential(libm::sqrt(two_l2 / 2.0)).unwrap()
    }

    #[test]
    fn diffusivity_values() {
        let d = Diffusivity::exponential(3.0).unwrap();
        assert_eq!(d.eval(0.0).unwrap(), 1.0);
        assert_relative_eq!(d.eval(18.0).unwrap(), E_INV, max_relative = 1e-15);
        let d10 = Diffusivity::exponential(10.0).unwrap();
        assert_relative_eq!(d10.eval(200.0).unwrap(), d.eval(18.0).unwrap(), max_relative = 1e-15);
        assert!(d.eval(-1e-3).is_err());
        assert!(Diffusivity::exponential(0.0).is_err());
        assert!(Diffusivity::exponential(-2.0).is_err());
    }

    #[test]
    fn scalar_flux_single_pixel() {
        let d = lambda_for_two_l2(25.0);
        let resp = single_pixel_response(&[3.0, 4.0], ChannelSemantics::Gradient2);
        let out = coupled_scalar_flux(&d, &resp);
        assert_relative_eq!(out.channel(0).get(1, 1), 3.0 * E_INV, max_relative = 1e-14);
        assert_relative_eq!(out.channel(1).get(1, 1), 4.0 * E_INV, max_relative = 1e-14);
        let zero = single_pixel_response(&[0.0, 0.0], ChannelSemantics::Gradient2);
        assert_eq!(coupled_scalar_flux(&d, &zero).max_abs(), 0.0);
    }

    #[test]
    fn scalar_flux_matches_pixel_loop_on_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch: Vec<ImageGrid> = (0..4)
            .map(|_| ImageGrid::from_fn(6, 5, |_, _| rng.gen_range(-2.0..2.0)).unwrap())
            .collect();
        let resp = OperatorResponse::new(ch.clone(), ChannelSemantics::Hessian4).unwrap();
        let out = coupled_scalar_flux(&Diffusivity::exponential(1.0).unwrap(), &resp);
        for y in 0..5 {
            for x in 0..6 {
                let mut s2 = 0.0;
                for c in &ch {
                    s2 += c.get(x, y) * c.get(x, y);
                }
                let g = libm::exp(-s2 / 2.0);
                for (k, c) in ch.iter().enumerate() {
                    assert_relative_eq!(out.channel(k).get(x, y), g * c.get(x, y), max_relative = 1e-14);
                }
            }
        }
    }

    #[test]
    fn uncoupled_flux_values() {
        let d = lambda_for_two_l2(25.0);
        let resp = single_pixel_response(&[3.0, 4.0], ChannelSemantics::Gradient2);
        let out = uncoupled_flux(&d, &resp);
        assert_relative_eq!(out.channel(0).get(0, 0), 3.0 * libm::exp(-9.0 / 25.0), max_relative = 1e-14);
        assert_relative_eq!(out.channel(1).get(0, 0), 4.0 * libm::exp(-16.0 / 25.0), max_relative = 1e-14);
        assert_ne!(out, coupled_scalar_flux(&d, &resp));

        let one = single_pixel_response(&[2.5], ChannelSemantics::Laplacian1);
        assert_eq!(uncoupled_flux(&d, &one), coupled_scalar_flux(&d, &one));
    }

    #[test]
    fn structure_tensor_cases() {
        let r = single_pixel_response(&[1.0, 0.0], ChannelSemantics::Gradient2);
        let st = accumulate_structure_tensor(&r, None).unwrap();
        assert_eq!(st.get(2, 2), Sym2::new(1.0, 0.0, 0.0));

        let r = single_pixel_response(&[1.0, 0.0, 0.0, 1.0], ChannelSemantics::MultiscaleGradient { scales: 2 });
        let st = accumulate_structure_tensor(&r, Some(&[1.0, 1.0])).unwrap();
        assert_eq!(st.get(0, 1), Sym2::IDENTITY);

        let lap = single_pixel_response(&[1.0], ChannelSemantics::Laplacian1);
        assert!(accumulate_structure_tensor(&lap, None).is_err());
        assert!(accumulate_structure_tensor(&r, Some(&[1.0])).is_err());
    }

    #[test]
    fn structure_tensor_matches_outer_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ch: Vec<ImageGrid> = (0..6)
            .map(|_| ImageGrid::from_fn(5, 4, |_, _| rng.gen_range(-3.0..3.0)).unwrap())
            .collect();
        let w = [0.3, 1.2, 2.0];
        let resp = OperatorResponse::new(ch.clone(), ChannelSemantics::MultiscaleGradient { scales: 3 }).unwrap();
        let st = accumulate_structure_tensor(&resp, Some(&w)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let mut m = [[0.0; 2]; 2];
                for l in 0..3 {
                    let v = [ch[2 * l].get(x, y), ch[2 * l + 1].get(x, y)];
                    for i in 0..2 {
                        for j in 0..2 {
                            m[i][j] += w[l] * v[i] * v[j];
                        }
                    }
                }
                let s = st.get(x, y);
                assert_relative_eq!(s.a, m[0][0], max_relative = 1e-12);
                assert_relative_eq!(s.b, m[0][1], max_relative = 1e-12, epsilon = 1e-12);
                assert_relative_eq!(s.c, m[1][1], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn matrix_diffusivity_cases() {
        let lambda = 1.7;
        let d = Diffusivity::exponential(lambda).unwrap();
        let two_l2 = 2.0 * lambda * lambda;
        let zero = SymMatrix2Field::zeros(3, 3);
        assert_eq!(matrix_diffusivity(&d, &zero).unwrap().get(1, 1), Sym2::IDENTITY);

        let diag = SymMatrix2Field::constant(3, 3, Sym2::new(two_l2, 0.0, 0.0));
        let out = matrix_diffusivity(&d, &diag).unwrap().get(0, 0);
        assert_relative_eq!(out.a, E_INV, max_relative = 1e-14);
        assert_eq!(out.b, 0.0);
        assert_relative_eq!(out.c, 1.0, max_relative = 1e-14);

        // rotation by 30 degrees built as R diag R^T
        let theta = 30f64.to_radians();
        let (s, c) = (theta.sin(), theta.cos());
        let m = Sym2::new(two_l2 * c * c, two_l2 * c * s, two_l2 * s * s);
        let expected = Sym2::new(E_INV * c * c + s * s, (E_INV - 1.0) * c * s, E_INV * s * s + c * c);
        let field = SymMatrix2Field::constant(3, 3, m);
        let got = matrix_diffusivity(&d, &field).unwrap().get(2, 0);
        assert!((got.a - expected.a).abs() < 1e-12);
        assert!((got.b - expected.b).abs() < 1e-12);
        assert!((got.c - expected.c).abs() < 1e-12);
    }

    #[test]
    fn matrix_diffusivity_rejects_indefinite() {
        let d = Diffusivity::exponential(1.0).unwrap();
        let mut field = SymMatrix2Field::zeros(4, 3);
        field.set(2, 1, Sym2::new(1.0, 2.0, 1.0));
        match matrix_diffusivity(&d, &field) {
            Err(Error::NumericalDomain { x, y, .. }) => assert_eq!((x, y), (2, 1)),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_flux_cases() {
        let d = lambda_for_two_l2(1.0);
        let resp = single_pixel_response(&[1.0, 0.0], ChannelSemantics::Gradient2);
        let st = accumulate_structure_tensor(&resp, None).unwrap();
        let out = coupled_tensor_flux(&d, &resp, &st).unwrap();
        assert_relative_eq!(out.channel(0).get(1, 1), E_INV, max_relative = 1e-14);
        assert_eq!(out.channel(1).get(1, 1), 0.0);

        let zero = single_pixel_response(&[0.0, 0.0], ChannelSemantics::Gradient2);
        assert_eq!(coupled_tensor_flux(&d, &zero, &st).unwrap().max_abs(), 0.0);

        let bad = SymMatrix2Field::zeros(4, 4);
        assert!(coupled_tensor_flux(&d, &resp, &bad).is_err());
    }

    #[test]
    fn isotropic_tensor_equals_scalar_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = Diffusivity::exponential(0.8).unwrap();
        let ch: Vec<ImageGrid> = (0..4)
            .map(|_| ImageGrid::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        let resp = OperatorResponse::new(ch, ChannelSemantics::MultiscaleGradient { scales: 2 }).unwrap();
        let sigma = 0.9;
        let st = SymMatrix2Field::constant(5, 5, Sym2::new(sigma, 0.0, sigma));
        let out = coupled_tensor_flux(&d, &resp, &st).unwrap();
        let g = d.g(sigma);
        for (o, i) in out.channels().iter().zip(resp.channels()) {
            for (a, b) in o.values().iter().zip(i.values()) {
                assert!((a - g * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_eigen_branch() {
        let m = Sym2::new(2.0, 1e-15, 2.0);
        let e = m.eigen();
        assert!(e.degenerate);
        let f = m.matrix_function(|nu| nu + 1.0);
        assert_eq!(f.b, 0.0);
    }

    fn psd_from(n1: f64, n2: f64, phi: f64) -> Sym2 {
        Sym2::new(n1, 0.0, n2).rotated(phi)
    }

    proptest! {
        #[test]
        fn matrix_function_rotation_covariance(
            n1 in 0.0f64..50.0, n2 in 0.0f64..50.0, phi in 0.0f64..6.3, theta in 0.0f64..6.3,
            lambda in 0.5f64..8.0,
        ) {
            let d = Diffusivity::exponential(lambda).unwrap();
            let m = psd_from(n1, n2, phi);
            let lhs = m.rotated(theta).matrix_function(|s| d.g(s));
            let rhs = m.matrix_function(|s| d.g(s)).rotated(theta);
            prop_assert!((lhs.a - rhs.a).abs() < 1e-10);
            prop_assert!((lhs.b - rhs.b).abs() < 1e-10);
            prop_assert!((lhs.c - rhs.c).abs() < 1e-10);
        }

        #[test]
        fn matrix_function_trace_identity(n1 in 0.0f64..50.0, n2 in 0.0f64..50.0, phi in 0.0f64..6.3) {
            let d = Diffusivity::exponential(2.0).unwrap();
            let m = psd_from(n1, n2, phi);
            let e = m.eigen();
            let f = m.matrix_function(|s| d.g(s));
            prop_assert!((f.trace() - (d.g(e.nu1.max(0.0)) + d.g(e.nu2.max(0.0)))).abs() < 1e-12);
        }

        #[test]
        fn scalar_flux_is_channel_permutation_symmetric(vals in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let d = Diffusivity::exponential(3.0).unwrap();
            let resp = single_pixel_response(&vals, ChannelSemantics::Hessian4);
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let presp = single_pixel_response(&permuted, ChannelSemantics::Hessian4);
            let out = coupled_scalar_flux(&d, &resp);
            let pout = coupled_scalar_flux(&d, &presp);
            for (k, &i) in perm.iter().enumerate() {
                let (a, b) = (pout.channel(k).get(1, 1), out.channel(i).get(1, 1));
                prop_assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn flux_never_increases_norm(gx in -100.0f64..100.0, gy in -100.0f64..100.0, lambda in 0.1f64..50.0) {
            let d = Diffusivity::exponential(lambda).unwrap();
            let resp = single_pixel_response(&[gx, gy], ChannelSemantics::Gradient2);
            let norm = libm::hypot(gx, gy);
            let st = accumulate_structure_tensor(&resp, None).unwrap();
            for out in [
                coupled_scalar_flux(&d, &resp),
                uncoupled_flux(&d, &resp),
                coupled_tensor_flux(&d, &resp, &st).unwrap(),
            ] {
                let n = libm::hypot(out.channel(0).get(0, 0), out.channel(1).get(0, 0));
                prop_assert!(n <= norm * (1.0 + 1e-12));
            }
        }
    }
}
