//! Image grids with reflecting boundaries and the separable convolution engine.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Smallest admissible side length; a 3x3 stencil needs one interior pixel.
pub const MIN_SIDE: usize = 3;

/// Gaussian kernels are truncated at `ceil(GAUSS_TRUNCATION * sigma)`.
pub const GAUSS_TRUNCATION: f64 = 3.0;

/// A real-valued 2-D scalar field on a unit-spaced grid, stored row-major.
///
/// `x` is the column index (`0..width`) and `y` the row index (`0..height`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Maps an arbitrary sample index onto `0..n` by reflection: `-1 -> 0`,
/// `-2 -> 1`, `n -> n - 1`, and so on, folded periodically with period `2n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    if m < n {
        m as usize
    } else {
        (2 * n - 1 - m) as usize
    }
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(invalid(alloc::format!(
                "grid must be at least {MIN_SIDE}x{MIN_SIDE}, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(invalid(alloc::format!(
                "expected {} values for a {width}x{height} grid, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(alloc::format!(
                "non-finite value at pixel ({}, {})",
                pos % width,
                pos / width
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::constant(width, height, 0.0)
    }

    /// Builds a grid by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    /// Zero grid of the same shape; cannot fail since `self` is valid.
    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: vec![0.0; self.values.len()],
        }
    }

    /// Internal constructor for buffers produced by shape-preserving kernels.
    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Sample with reflecting boundary handling for out-of-range indices.
    #[inline]
    pub fn get_reflected(&self, x: isize, y: isize) -> f64 {
        self.get(reflect_index(x, self.width), reflect_index(y, self.height))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.width, self.height, self.values.iter().map(|&v| f(v)).collect())
    }

    /// `self += factor * other`; shapes must match.
    pub fn add_scaled(&mut self, factor: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Rotates the grid by 90 degrees: `out(x, y) = in(width - 1 - y, x)`.
    ///
    /// Under this map `D_x(rot u) = rot(D_y u)` and `D_y(rot u) = -rot(D_x u)`.
    pub fn rot90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..w {
            for x in 0..h {
                out.push(self.get(w - 1 - y, x));
            }
        }
        Self::from_raw(h, w, out)
    }

    pub fn transpose(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..w {
            for x in 0..h {
                out.push(self.get(y, x));
            }
        }
        Self::from_raw(h, w, out)
    }

    /// Clamps to `[0, 255]` and rounds half away from zero, as done when
    /// writing 8-bit images.
    pub fn quantized_u8(&self) -> Self {
        self.map(|v| libm::round(v.clamp(0.0, 255.0)))
    }
}

/// Euclidean inner product over all pixels (and channels).
pub trait InnerProduct {
    fn inner_product(&self, other: &Self) -> Result<f64>;
}

impl InnerProduct for ImageGrid {
    fn inner_product(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(invalid(alloc::format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            )));
        }
        Ok(dot(&self.values, &other.values))
    }
}

pub fn inner_product<T: InnerProduct>(a: &T, b: &T) -> Result<f64> {
    a.inner_product(b)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sampled, truncated and renormalized 1-D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(invalid(alloc::format!(
                "gaussian sigma must be finite and non-negative, got {sigma}"
            )));
        }
        let radius = libm::ceil(GAUSS_TRUNCATION * sigma) as usize;
        if radius == 0 {
            return Ok(Self {
                radius: 0,
                weights: vec![1.0],
            });
        }
        let denom = 2.0 * sigma * sigma;
        let mut weights: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                libm::exp(-d * d / denom)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { radius, weights })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Weights for offsets `-radius..=radius`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }

    /// Separable convolution along x then y with reflecting boundaries.
    ///
    /// Each output pixel sums its taps in ascending offset order, so the
    /// result is bit-deterministic for a fixed input.
    pub fn apply(&self, img: &ImageGrid) -> ImageGrid {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = (img.width, img.height);
        let r = self.radius;
        let taps = self.weights.len();

        let mut horizontal = Vec::with_capacity(w * h);
        let mut padded = vec![0.0; w + 2 * r];
        for y in 0..h {
            let row = img.row(y);
            for (k, p) in padded.iter_mut().enumerate() {
                *p = row[reflect_index(k as isize - r as isize, w)];
            }
            for_each_block(
                &mut horizontal,
                w,
                |x0, acc| {
                    for (k, &wk) in self.weights.iter().enumerate() {
                        axpy_block(acc, wk, &padded[x0 + k..]);
                    }
                },
                |x0, acc| {
                    for (k, &wk) in self.weights.iter().enumerate() {
                        axpy_tail(acc, wk, &padded[x0 + k..]);
                    }
                },
            );
        }

        let mut result = Vec::with_capacity(w * h);
        let mut sources: Vec<&[f64]> = Vec::with_capacity(taps);
        for y in 0..h {
            sources.clear();
            for k in 0..taps {
                let sy = reflect_index(y as isize + k as isize - r as isize, h);
                sources.push(&horizontal[sy * w..(sy + 1) * w]);
            }
            for_each_block(
                &mut result,
                w,
                |x0, acc| {
                    for (&wk, src) in self.weights.iter().zip(&sources) {
                        axpy_block(acc, wk, &src[x0..]);
                    }
                },
                |x0, acc| {
                    for (&wk, src) in self.weights.iter().zip(&sources) {
                        axpy_tail(acc, wk, &src[x0..]);
                    }
                },
            );
        }
        ImageGrid::from_raw(w, h, result)
    }
}

const BLOCK: usize = 16;

/// Calls `f(x0, acc)` for consecutive blocks of `out`, with `acc` zeroed on
/// entry, and stores each block. Keeping the block in a small local array lets
/// the tap loop accumulate in registers.
#[inline(always)]
fn for_each_block(
    out: &mut Vec<f64>,
    len: usize,
    mut full: impl FnMut(usize, &mut [f64; BLOCK]),
    mut tail: impl FnMut(usize, &mut [f64]),
) {
    let mut x0 = 0;
    while x0 + BLOCK <= len {
        let mut acc = [0.0; BLOCK];
        full(x0, &mut acc);
        out.extend_from_slice(&acc);
        x0 += BLOCK;
    }
    if x0 < len {
        let n = len - x0;
        let mut acc = [0.0; BLOCK];
        tail(x0, &mut acc[..n]);
        out.extend_from_slice(&acc[..n]);
    }
}

#[inline(always)]
fn axpy_block(acc: &mut [f64; BLOCK], wk: f64, src: &[f64]) {
    let src: &[f64; BLOCK] = src[..BLOCK].try_into().expect("block-sized source");
    for i in 0..BLOCK {
        acc[i] += wk * src[i];
    }
}

#[inline(always)]
fn axpy_tail(acc: &mut [f64], wk: f64, src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += wk * s;
    }
}

/// Gaussian smoothing with standard deviation `sigma` (in pixels).
pub fn gaussian_convolve(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    Ok(GaussianKernel::new(sigma)?.apply(img))
}

/// `(u[x+1, y] - u[x-1, y]) / 2` with reflecting sampling.
pub fn central_diff_x(img: &ImageGrid) -> ImageGrid {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = img.row(y);
        let o = &mut out[y * w..(y + 1) * w];
        o[0] = 0.5 * (row[1] - row[0]);
        for x in 1..w - 1 {
            o[x] = 0.5 * (row[x + 1] - row[x - 1]);
        }
        o[w - 1] = 0.5 * (row[w - 1] - row[w - 2]);
    }
    ImageGrid::from_raw(w, h, out)
}

/// `(u[x, y+1] - u[x, y-1]) / 2` with reflecting sampling.
pub fn central_diff_y(img: &ImageGrid) -> ImageGrid {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = img.row(reflect_index(y as isize + 1, h));
        let down = img.row(reflect_index(y as isize - 1, h));
        let o = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            o[x] = 0.5 * (up[x] - down[x]);
        }
    }
    ImageGrid::from_raw(w, h, out)
}

/// Exact transpose of [`central_diff_x`], including the boundary rows.
pub fn central_diff_x_adjoint(v: &ImageGrid) -> ImageGrid {
    let (w, h) = (v.width, v.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = v.row(y);
        let o = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            let half = 0.5 * row[x];
            o[reflect_index(x as isize + 1, w)] += half;
            o[reflect_index(x as isize - 1, w)] -= half;
        }
    }
    ImageGrid::from_raw(w, h, out)
}

/// Exact transpose of [`central_diff_y`].
pub fn central_diff_y_adjoint(v: &ImageGrid) -> ImageGrid {
    let (w, h) = (v.width, v.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = reflect_index(y as isize + 1, h) * w;
        let down = reflect_index(y as isize - 1, h) * w;
        let row = v.row(y);
        for x in 0..w {
            let half = 0.5 * row[x];
            out[up + x] += half;
            out[down + x] -= half;
        }
    }
    ImageGrid::from_raw(w, h, out)
}

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic sample at a fractional position, reflecting outside the grid.
pub fn sample_bicubic(img: &ImageGrid, x: f64, y: f64) -> f64 {
    let x0 = libm::floor(x);
    let y0 = libm::floor(y);
    let mut acc = 0.0;
    for j in -1..=2isize {
        let wy = cubic_weight(y - (y0 + j as f64));
        let mut row_acc = 0.0;
        for i in -1..=2isize {
            let wx = cubic_weight(x - (x0 + i as f64));
            row_acc += wx * img.get_reflected(x0 as isize + i, y0 as isize + j);
        }
        acc += wy * row_acc;
    }
    acc
}

/// Rotates the image content by `degrees` about the grid centre with bicubic
/// resampling; the output keeps the input shape.
pub fn rotate_bicubic(img: &ImageGrid, degrees: f64) -> ImageGrid {
    let theta = degrees.to_radians();
    let (s, c) = libm::sincos(theta);
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse rotation of the output coordinate
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            out.push(sample_bicubic(img, sx, sy));
        }
    }
    ImageGrid::from_raw(img.width, img.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_small_or_non_finite_grids() {
        assert!(ImageGrid::zeros(2, 5).is_err());
        assert!(ImageGrid::new(3, 3, vec![0.0; 8]).is_err());
        let mut v = vec![0.0; 9];
        v[4] = f64::NAN;
        assert!(ImageGrid::new(3, 3, v).is_err());
    }

    #[test]
    fn reflect_index_maps_whole_samples() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(3, 5), 3);
        // far outside still lands in range
        assert_eq!(reflect_index(-11, 5), 0);
        assert_eq!(reflect_index(17, 5), 2);
    }

    #[test]
    fn gaussian_keeps_constants() {
        let img = ImageGrid::constant(9, 7, 42.5).unwrap();
        for sigma in [0.3, 1.0, 2.5, 6.0] {
            let out = gaussian_convolve(&img, sigma).unwrap();
            for v in out.values() {
                assert_relative_eq!(*v, 42.5, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn gaussian_sigma_zero_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_grid(&mut rng, 8, 6);
        assert_eq!(gaussian_convolve(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let img = ImageGrid::zeros(4, 4).unwrap();
        assert!(gaussian_convolve(&img, f64::NAN).is_err());
        assert!(gaussian_convolve(&img, f64::INFINITY).is_err());
        assert!(gaussian_convolve(&img, -1.0).is_err());
    }

    #[test]
    fn gaussian_impulse_matches_brute_force_2d_kernel() {
        let n = 33;
        let sigma = 1.5;
        let c = n / 2;
        let img = ImageGrid::from_fn(n, n, |x, y| if x == c && y == c { 1.0 } else { 0.0 }).unwrap();
        let out = gaussian_convolve(&img, sigma).unwrap();

        // Oracle: 2-D kernel summed directly over the truncated square.
        let r = libm::ceil(3.0 * sigma) as isize;
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                total += libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma));
            }
        }
        assert_relative_eq!(out.get(c, c), 1.0 / total, max_relative = 1e-12);
        let off = libm::exp(-(4.0 + 1.0) / (2.0 * sigma * sigma)) / total;
        assert_relative_eq!(out.get(c + 2, c - 1), off, max_relative = 1e-12);
        assert_eq!(out.get(c + r as usize + 1, c), 0.0);
    }

    #[test]
    fn gaussian_is_self_adjoint_and_mean_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(w, h, sigma) in &[(7, 7, 5.6), (12, 9, 1.2), (20, 31, 3.16), (5, 4, 0.56)] {
            let a = random_grid(&mut rng, w, h);
            let b = random_grid(&mut rng, w, h);
            let ga = gaussian_convolve(&a, sigma).unwrap();
            let gb = gaussian_convolve(&b, sigma).unwrap();
            let lhs = ga.inner_product(&b).unwrap();
            let rhs = a.inner_product(&gb).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (lhs.abs() + 1.0));
            assert!((ga.mean() - a.mean()).abs() <= 1e-10 * (a.mean().abs() + 1e-3));
        }
    }

    #[test]
    fn central_differences_on_ramp_and_quadratic() {
        let ramp = ImageGrid::from_fn(6, 5, |x, _| x as f64).unwrap();
        let dx = central_diff_x(&ramp);
        for y in 0..5 {
            assert_eq!(dx.get(0, y), 0.5);
            assert_eq!(dx.get(5, y), 0.5);
            for x in 1..5 {
                assert_eq!(dx.get(x, y), 1.0);
            }
        }
        assert_eq!(central_diff_y(&ramp).max_abs(), 0.0);

        let quad = ImageGrid::from_fn(7, 7, |_, y| (y * y) as f64).unwrap();
        let dy = central_diff_y(&quad);
        for y in 1..6 {
            assert_eq!(dy.get(3, y), 2.0 * y as f64);
        }
        let flat = ImageGrid::constant(5, 5, 3.0).unwrap();
        assert_eq!(central_diff_x(&flat).max_abs(), 0.0);
    }

    #[test]
    fn central_difference_adjoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = rng.gen_range(3..12);
            let h = rng.gen_range(3..12);
            let u = random_grid(&mut rng, w, h);
            let v = random_grid(&mut rng, w, h);
            let l = central_diff_x(&u).inner_product(&v).unwrap();
            let r = u.inner_product(&central_diff_x_adjoint(&v)).unwrap();
            assert!((l - r).abs() < 1e-12);
            let l = central_diff_y(&u).inner_product(&v).unwrap();
            let r = u.inner_product(&central_diff_y_adjoint(&v)).unwrap();
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_cases() {
        let ones = ImageGrid::constant(4, 4, 1.0).unwrap();
        assert_eq!(ones.inner_product(&ones).unwrap(), 16.0);
        let checker = ImageGrid::from_fn(4, 4, |x, y| if (x + y) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        assert_eq!(checker.inner_product(&ones).unwrap(), 0.0);
        assert!(ones.inner_product(&ImageGrid::zeros(4, 5).unwrap()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_grid(&mut rng, 5, 5);
        let b = random_grid(&mut rng, 5, 5);
        let mut oracle = 0.0;
        for y in 0..5 {
            for x in 0..5 {
                oracle += a.get(x, y) * b.get(x, y);
            }
        }
        assert_relative_eq!(inner_product(&a, &b).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_grid(&mut rng, 6, 4);
        let r = a.rot90();
        assert_eq!((r.width(), r.height()), (4, 6));
        assert_eq!(r.rot90().rot90().rot90(), a);
    }

    #[test]
    fn rot90_swaps_derivative_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_grid(&mut rng, 7, 5);
        let ru = u.rot90();
        assert_eq!(central_diff_x(&ru), central_diff_y(&u).rot90());
        assert_eq!(central_diff_y(&ru), central_diff_x(&u).rot90().scaled(-1.0));
    }

    #[test]
    fn bicubic_rotation_by_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_grid(&mut rng, 9, 9);
        let r = rotate_bicubic(&u, 0.0);
        for (a, b) in r.values().iter().zip(u.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn quantization_clamps_and_rounds_half_away() {
        let g = ImageGrid::new(3, 3, vec![-4.0, 0.5, 1.49, 254.5, 300.0, 2.5, 0.0, 7.0, 128.2]).unwrap();
        let q = g.quantized_u8();
        assert_eq!(q.values(), &[0.0, 1.0, 1.0, 255.0, 255.0, 3.0, 0.0, 7.0, 128.0]);
    }
}
