//! Discrete differential operators `K` and their exact adjoints `K^T`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::grid::{
    central_diff_x, central_diff_x_adjoint, central_diff_y, central_diff_y_adjoint, dot, reflect_index,
    GaussianKernel, ImageGrid, InnerProduct,
};

/// Which operator produced a response, and therefore how its channels are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSemantics {
    /// `(d/dx, d/dy)`.
    Gradient2,
    /// Five-point Laplacian.
    Laplacian1,
    /// `(d_xx, d_xy, d_yx, d_yy)`.
    Hessian4,
    /// `beta_l * G_{sigma_l} * grad`, two channels per scale, scale-major.
    MultiscaleGradient { scales: usize },
}

impl ChannelSemantics {
    pub fn channel_count(self) -> usize {
        match self {
            Self::Gradient2 => 2,
            Self::Laplacian1 => 1,
            Self::Hessian4 => 4,
            Self::MultiscaleGradient { scales } => 2 * scales,
        }
    }

    /// Number of `(gx, gy)` pairs for gradient-like semantics.
    pub fn gradient_groups(self) -> Option<usize> {
        match self {
            Self::Gradient2 => Some(1),
            Self::MultiscaleGradient { scales } => Some(scales),
            _ => None,
        }
    }
}

/// Multi-channel field holding `K u`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorResponse {
    channels: Vec<ImageGrid>,
    semantics: ChannelSemantics,
}

impl OperatorResponse {
    pub fn new(channels: Vec<ImageGrid>, semantics: ChannelSemantics) -> Result<Self> {
        if channels.len() != semantics.channel_count() {
            return Err(invalid(format!(
                "{semantics:?} needs {} channels, got {}",
                semantics.channel_count(),
                channels.len()
            )));
        }
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| !c.same_shape(first)) {
                return Err(invalid("response channels differ in shape"));
            }
        } else {
            return Err(invalid("response needs at least one channel"));
        }
        Ok(Self { channels, semantics })
    }

    pub fn zeros(semantics: ChannelSemantics, width: usize, height: usize) -> Result<Self> {
        let proto = ImageGrid::zeros(width, height)?;
        Ok(Self {
            channels: vec![proto; semantics.channel_count()],
            semantics,
        })
    }

    pub(crate) fn from_parts(channels: Vec<ImageGrid>, semantics: ChannelSemantics) -> Self {
        debug_assert_eq!(channels.len(), semantics.channel_count());
        Self { channels, semantics }
    }

    pub fn semantics(&self) -> ChannelSemantics {
        self.semantics
    }

    pub fn channels(&self) -> &[ImageGrid] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &ImageGrid {
        &self.channels[i]
    }

    pub fn into_channels(self) -> Vec<ImageGrid> {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn max_abs(&self) -> f64 {
        self.channels.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.semantics == other.semantics && self.channels[0].same_shape(&other.channels[0])
    }

    pub fn map_channels(&self, f: impl Fn(&ImageGrid) -> ImageGrid) -> Self {
        Self::from_parts(self.channels.iter().map(f).collect(), self.semantics)
    }
}

impl InnerProduct for OperatorResponse {
    fn inner_product(&self, other: &Self) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(invalid("operator responses differ in layout"));
        }
        Ok(self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| dot(a.values(), b.values()))
            .sum())
    }
}

/// Operator choice; only the multiscale variant carries parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Gradient2,
    Laplacian1,
    Hessian4,
    MultiscaleGradient,
}

/// An immutable operator description with its Gaussian kernels prepared.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    kind: OperatorKind,
    sigmas: Vec<f64>,
    betas: Vec<f64>,
    kernels: Vec<GaussianKernel>,
}

impl OperatorSpec {
    pub fn gradient() -> Self {
        Self::simple(OperatorKind::Gradient2)
    }

    pub fn laplacian() -> Self {
        Self::simple(OperatorKind::Laplacian1)
    }

    pub fn hessian() -> Self {
        Self::simple(OperatorKind::Hessian4)
    }

    fn simple(kind: OperatorKind) -> Self {
        Self {
            kind,
            sigmas: Vec::new(),
            betas: Vec::new(),
            kernels: Vec::new(),
        }
    }

    /// Weighted Gaussian-smoothed gradients `beta_l * G_{sigma_l} * grad`.
    pub fn multiscale_gradient(sigmas: &[f64], betas: &[f64]) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(invalid("multiscale operator needs at least one scale"));
        }
        if sigmas.len() != betas.len() {
            return Err(invalid(format!(
                "{} scales but {} scale weights",
                sigmas.len(),
                betas.len()
            )));
        }
        if sigmas.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(invalid("scales must be sorted in increasing order"));
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(invalid("scale weights must be finite"));
        }
        let kernels = sigmas.iter().map(|&s| GaussianKernel::new(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: OperatorKind::MultiscaleGradient,
            sigmas: sigmas.to_vec(),
            betas: betas.to_vec(),
            kernels,
        })
    }

    /// Same scales, new weights; avoids rebuilding the kernels.
    pub fn with_betas(&self, betas: &[f64]) -> Result<Self> {
        if self.kind != OperatorKind::MultiscaleGradient || betas.len() != self.betas.len() {
            return Err(invalid("beta update needs a multiscale operator with matching scale count"));
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(invalid("scale weights must be finite"));
        }
        let mut out = self.clone();
        out.betas.copy_from_slice(betas);
        Ok(out)
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(crate) fn kernels(&self) -> &[GaussianKernel] {
        &self.kernels
    }

    /// Number of scales `L` (1 for the single-scale operators).
    pub fn scale_count(&self) -> usize {
        match self.kind {
            OperatorKind::MultiscaleGradient => self.sigmas.len(),
            _ => 1,
        }
    }

    pub fn semantics(&self) -> ChannelSemantics {
        match self.kind {
            OperatorKind::Gradient2 => ChannelSemantics::Gradient2,
            OperatorKind::Laplacian1 => ChannelSemantics::Laplacian1,
            OperatorKind::Hessian4 => ChannelSemantics::Hessian4,
            OperatorKind::MultiscaleGradient => ChannelSemantics::MultiscaleGradient {
                scales: self.sigmas.len(),
            },
        }
    }

    pub fn is_gradient_like(&self) -> bool {
        matches!(self.kind, OperatorKind::Gradient2 | OperatorKind::MultiscaleGradient)
    }
}

/// Five-point Laplacian with reflecting sampling.
fn laplacian(u: &ImageGrid) -> ImageGrid {
    let (w, h) = (u.width(), u.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = u.row(reflect_index(y as isize + 1, h));
        let down = u.row(reflect_index(y as isize - 1, h));
        let row = u.row(y);
        for x in 0..w {
            let left = row[reflect_index(x as isize - 1, w)];
            let right = row[reflect_index(x as isize + 1, w)];
            out[y * w + x] = left + right + up[x] + down[x] - 4.0 * row[x];
        }
    }
    ImageGrid::from_raw(w, h, out)
}

/// Transpose of [`laplacian`]: scatter the stencil from every source pixel.
fn laplacian_adjoint(v: &ImageGrid) -> ImageGrid {
    let (w, h) = (v.width(), v.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = reflect_index(y as isize + 1, h);
        let down = reflect_index(y as isize - 1, h);
        for x in 0..w {
            let val = v.get(x, y);
            let left = reflect_index(x as isize - 1, w);
            let right = reflect_index(x as isize + 1, w);
            out[y * w + left] += val;
            out[y * w + right] += val;
            out[up * w + x] += val;
            out[down * w + x] += val;
            out[y * w + x] -= 4.0 * val;
        }
    }
    ImageGrid::from_raw(w, h, out)
}

fn second_diff_x(u: &ImageGrid) -> ImageGrid {
    let (w, h) = (u.width(), u.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = u.row(y);
        for x in 0..w {
            out[y * w + x] =
                row[reflect_index(x as isize + 1, w)] - 2.0 * row[x] + row[reflect_index(x as isize - 1, w)];
        }
    }
    ImageGrid::from_raw(w, h, out)
}

fn second_diff_x_adjoint(v: &ImageGrid) -> ImageGrid {
    let (w, h) = (v.width(), v.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let val = v.get(x, y);
            out[y * w + reflect_index(x as isize + 1, w)] += val;
            out[y * w + reflect_index(x as isize - 1, w)] += val;
            out[y * w + x] -= 2.0 * val;
        }
    }
    ImageGrid::from_raw(w, h, out)
}

fn second_diff_y(u: &ImageGrid) -> ImageGrid {
    second_diff_x(&u.transpose()).transpose()
}

fn second_diff_y_adjoint(v: &ImageGrid) -> ImageGrid {
    second_diff_x_adjoint(&v.transpose()).transpose()
}

/// Computes `K u` for the given operator.
pub fn apply_operator(spec: &OperatorSpec, img: &ImageGrid) -> OperatorResponse {
    let semantics = spec.semantics();
    let channels = match spec.kind {
        OperatorKind::Gradient2 => vec![central_diff_x(img), central_diff_y(img)],
        OperatorKind::Laplacian1 => vec![laplacian(img)],
        OperatorKind::Hessian4 => {
            let dx = central_diff_x(img);
            let dy = central_diff_y(img);
            vec![second_diff_x(img), central_diff_y(&dx), central_diff_x(&dy), second_diff_y(img)]
        }
        OperatorKind::MultiscaleGradient => {
            let gx = central_diff_x(img);
            let gy = central_diff_y(img);
            let mut out = Vec::with_capacity(2 * spec.sigmas.len());
            for (kernel, &beta) in spec.kernels.iter().zip(&spec.betas) {
                out.push(kernel.apply(&gx).scaled(beta));
                out.push(kernel.apply(&gy).scaled(beta));
            }
            out
        }
    };
    OperatorResponse::from_parts(channels, semantics)
}

/// Computes `K^T v`, the exact transpose of [`apply_operator`].
pub fn apply_adjoint(spec: &OperatorSpec, resp: &OperatorResponse) -> Result<ImageGrid> {
    if resp.semantics != spec.semantics() {
        return Err(invalid(format!(
            "response semantics {:?} do not match operator {:?}",
            resp.semantics,
            spec.semantics()
        )));
    }
    let ch = &resp.channels;
    let out = match spec.kind {
        OperatorKind::Gradient2 => {
            let mut out = central_diff_x_adjoint(&ch[0]);
            out.add_scaled(1.0, &central_diff_y_adjoint(&ch[1]));
            out
        }
        OperatorKind::Laplacian1 => laplacian_adjoint(&ch[0]),
        OperatorKind::Hessian4 => {
            let mut out = second_diff_x_adjoint(&ch[0]);
            // xy = D_y D_x, so its transpose is D_x^T D_y^T
            out.add_scaled(1.0, &central_diff_x_adjoint(&central_diff_y_adjoint(&ch[1])));
            out.add_scaled(1.0, &central_diff_y_adjoint(&central_diff_x_adjoint(&ch[2])));
            out.add_scaled(1.0, &second_diff_y_adjoint(&ch[3]));
            out
        }
        OperatorKind::MultiscaleGradient => {
            let mut sx = ch[0].zeros_like();
            let mut sy = ch[0].zeros_like();
            for (l, (kernel, &beta)) in spec.kernels.iter().zip(&spec.betas).enumerate() {
                sx.add_scaled(beta, &kernel.apply(&ch[2 * l]));
                sy.add_scaled(beta, &kernel.apply(&ch[2 * l + 1]));
            }
            let mut out = central_diff_x_adjoint(&sx);
            out.add_scaled(1.0, &central_diff_y_adjoint(&sy));
            out
        }
    };
    Ok(out)
}
