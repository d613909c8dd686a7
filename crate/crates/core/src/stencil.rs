//! Two-parameter 3x3 discretisation of `div(D grad u)`.
//!
//! Each pair of neighbouring pixels `p, q` (axial or diagonal) exchanges the
//! flux `w_pq (u_q - u_p)`, where `w_pq` is built from the tensor entries
//! averaged over the pair. The weights satisfy, for constant `D`,
//!
//! ```text
//! w_x + w_pp + w_pm = a,   w_y + w_pp + w_pm = c,   2 (w_pp - w_pm) = 2 b
//! ```
//!
//! so the scheme is consistent for every `alpha`. `alpha` moves isotropic
//! weight from the axial to the diagonal neighbours; at `alpha = 1/2` and
//! `D = g I` the axial weights vanish and the grid splits into two
//! checkerboards. `gamma` moves the mixed-derivative weight from the signed
//! split `+-b/2` onto a symmetric `|b|` share of both diagonals, taken from the
//! axial weights, bounded by `(1 - 2 alpha)`.
//!
//! Pairs that would cross the image border exchange nothing, which keeps the
//! operator symmetric with zero row sums.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::flux::SymMatrix2Field;
use crate::grid::ImageGrid;

pub fn check_stencil_params(alpha: f64, gamma: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1/2], got {alpha}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Precomputed pair weights for one tensor field.
///
/// Edge arrays are indexed by the pixel the pair starts from: `east` joins
/// `(x, y)` and `(x + 1, y)`, `south` joins `(x, y + 1)`, `south_east` joins
/// `(x + 1, y + 1)` and `south_west` joins `(x - 1, y + 1)`. Pairs leaving the
/// grid carry weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilWeights {
    width: usize,
    height: usize,
    east: Vec<f64>,
    south: Vec<f64>,
    south_east: Vec<f64>,
    south_west: Vec<f64>,
}

impl StencilWeights {
    pub fn new(alpha: f64, gamma: f64, tensor: &SymMatrix2Field) -> Result<Self> {
        check_stencil_params(alpha, gamma)?;
        let (w, h) = (tensor.width(), tensor.height());
        let (a, b, c) = tensor.planes();
        let mix = gamma * (1.0 - 2.0 * alpha);
        let n = w * h;
        let mut east = vec![0.0; n];
        let mut south = vec![0.0; n];
        let mut south_east = vec![0.0; n];
        let mut south_west = vec![0.0; n];

        let axial_x = |p: usize, q: usize| {
            let (am, bm, cm) = (0.5 * (a[p] + a[q]), 0.5 * (b[p] + b[q]), 0.5 * (c[p] + c[q]));
            (1.0 - alpha) * am - alpha * cm - mix * bm.abs()
        };
        let axial_y = |p: usize, q: usize| {
            let (am, bm, cm) = (0.5 * (a[p] + a[q]), 0.5 * (b[p] + b[q]), 0.5 * (c[p] + c[q]));
            (1.0 - alpha) * cm - alpha * am - mix * bm.abs()
        };
        let diagonal = |p: usize, q: usize, sign: f64| {
            let (am, bm, cm) = (0.5 * (a[p] + a[q]), 0.5 * (b[p] + b[q]), 0.5 * (c[p] + c[q]));
            0.5 * alpha * (am + cm) + 0.5 * sign * bm + 0.5 * mix * bm.abs()
        };

        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    east[p] = axial_x(p, p + 1);
                }
                if y + 1 < h {
                    south[p] = axial_y(p, p + w);
                    if x + 1 < w {
                        south_east[p] = diagonal(p, p + w + 1, 1.0);
                    }
                    if x > 0 {
                        south_west[p] = diagonal(p, p + w - 1, -1.0);
                    }
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            east,
            south,
            south_east,
            south_west,
        })
    }

    /// Neighbour weights around `(x, y)`, indexed `[dy + 1][dx + 1]`; the
    /// centre holds minus the sum of the others.
    pub fn pixel_stencil(&self, x: usize, y: usize) -> [[f64; 3]; 3] {
        let w = self.width;
        let p = y * w + x;
        let mut s = [[0.0; 3]; 3];
        s[1][2] = self.east[p];
        s[2][1] = self.south[p];
        s[2][2] = self.south_east[p];
        s[2][0] = self.south_west[p];
        if x > 0 {
            s[1][0] = self.east[p - 1];
        }
        if y > 0 {
            s[0][1] = self.south[p - w];
            if x > 0 {
                s[0][0] = self.south_east[p - w - 1];
            }
            if x + 1 < w {
                s[0][2] = self.south_west[p - w + 1];
            }
        }
        let total: f64 = s.iter().flatten().sum();
        s[1][1] = -total;
        s
    }

    /// Computes `div(D grad u)`.
    pub fn apply(&self, u: &ImageGrid) -> Result<ImageGrid> {
        if u.width() != self.width || u.height() != self.height {
            return Err(invalid(format!(
                "stencil is {}x{} but image is {}x{}",
                self.width,
                self.height,
                u.width(),
                u.height()
            )));
        }
        Ok(self.apply_unchecked(u))
    }

    pub(crate) fn apply_unchecked(&self, u: &ImageGrid) -> ImageGrid {
        let (w, h) = (self.width, self.height);
        let v = u.values();
        let mut out = vec![0.0; w * h];
        let (e, s, se, sw) = (&self.east, &self.south, &self.south_east, &self.south_west);

        let pixel = |x: usize, y: usize| -> f64 {
            let p = y * w + x;
            let up = v[p];
            let mut acc = 0.0;
            if x > 0 {
                acc += e[p - 1] * (v[p - 1] - up);
            }
            if x + 1 < w {
                acc += e[p] * (v[p + 1] - up);
            }
            if y > 0 {
                acc += s[p - w] * (v[p - w] - up);
                if x > 0 {
                    acc += se[p - w - 1] * (v[p - w - 1] - up);
                }
                if x + 1 < w {
                    acc += sw[p - w + 1] * (v[p - w + 1] - up);
                }
            }
            if y + 1 < h {
                acc += s[p] * (v[p + w] - up);
                if x > 0 {
                    acc += sw[p] * (v[p + w - 1] - up);
                }
                if x + 1 < w {
                    acc += se[p] * (v[p + w + 1] - up);
                }
            }
            acc
        };

        for y in 0..h {
            if y == 0 || y + 1 == h {
                for x in 0..w {
                    out[y * w + x] = pixel(x, y);
                }
                continue;
            }
            out[y * w] = pixel(0, y);
            out[y * w + w - 1] = pixel(w - 1, y);
            // interior: same term order as `pixel`, without the border checks
            for x in 1..w - 1 {
                let p = y * w + x;
                let up = v[p];
                let mut acc = 0.0;
                acc += e[p - 1] * (v[p - 1] - up);
                acc += e[p] * (v[p + 1] - up);
                acc += s[p - w] * (v[p - w] - up);
                acc += se[p - w - 1] * (v[p - w - 1] - up);
                acc += sw[p - w + 1] * (v[p - w + 1] - up);
                acc += s[p] * (v[p + w] - up);
                acc += sw[p] * (v[p + w - 1] - up);
                acc += se[p] * (v[p + w + 1] - up);
                out[p] = acc;
            }
        }
        ImageGrid::from_raw(w, h, out)
    }
}

/// Sensitivities of a scalar objective with respect to the four edge-weight planes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EdgeGradient {
    east: Vec<f64>,
    south: Vec<f64>,
    south_east: Vec<f64>,
    south_west: Vec<f64>,
}

impl EdgeGradient {
    pub(crate) fn zeros(n: usize) -> Self {
        Self {
            east: vec![0.0; n],
            south: vec![0.0; n],
            south_east: vec![0.0; n],
            south_west: vec![0.0; n],
        }
    }

    /// Adds the weight sensitivities of `<out_bar, A(W) v>`, where each edge
    /// `(p, q)` contributes `(out_bar_p - out_bar_q) (v_q - v_p)`.
    pub(crate) fn accumulate(&mut self, width: usize, height: usize, v: &[f64], out_bar: &[f64]) {
        let w = width;
        for y in 0..height {
            for x in 0..w {
                let p = y * w + x;
                let edge = |q: usize| (out_bar[p] - out_bar[q]) * (v[q] - v[p]);
                if x + 1 < w {
                    self.east[p] += edge(p + 1);
                }
                if y + 1 < height {
                    self.south[p] += edge(p + w);
                    if x + 1 < w {
                        self.south_east[p] += edge(p + w + 1);
                    }
                    if x > 0 {
                        self.south_west[p] += edge(p + w - 1);
                    }
                }
            }
        }
    }

    /// Pulls the edge sensitivities back onto the tensor planes `(a, b, c)`.
    pub(crate) fn tensor_gradient(&self, alpha: f64, gamma: f64, tensor: &SymMatrix2Field) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (w, h) = (tensor.width(), tensor.height());
        let (_, b, _) = tensor.planes();
        let mix = gamma * (1.0 - 2.0 * alpha);
        let n = w * h;
        let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        // each weight depends on the pair averages, so half of every partial goes to each end
        let mut spread = |p: usize, q: usize, wbar: f64, da: f64, db: f64, dc: f64| {
            for r in [p, q] {
                ga[r] += 0.5 * wbar * da;
                gb[r] += 0.5 * wbar * db;
                gc[r] += 0.5 * wbar * dc;
            }
        };
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    let q = p + 1;
                    let sb = sign(b[p] + b[q]);
                    spread(p, q, self.east[p], 1.0 - alpha, -mix * sb, -alpha);
                }
                if y + 1 < h {
                    let q = p + w;
                    let sb = sign(b[p] + b[q]);
                    spread(p, q, self.south[p], -alpha, -mix * sb, 1.0 - alpha);
                    if x + 1 < w {
                        let q = p + w + 1;
                        let sb = sign(b[p] + b[q]);
                        spread(p, q, self.south_east[p], 0.5 * alpha, 0.5 + 0.5 * mix * sb, 0.5 * alpha);
                    }
                    if x > 0 {
                        let q = p + w - 1;
                        let sb = sign(b[p] + b[q]);
                        spread(p, q, self.south_west[p], 0.5 * alpha, -0.5 + 0.5 * mix * sb, 0.5 * alpha);
                    }
                }
            }
        }
        (ga, gb, gc)
    }
}

/// 3x3 nonstandard discretisation of `div(D grad u)` with free parameters
/// `alpha` in `[0, 1/2]` and `gamma` in `[0, 1]`.
pub fn stencil_divergence(alpha: f64, gamma: f64, tensor: &SymMatrix2Field, u: &ImageGrid) -> Result<ImageGrid> {
    let weights = StencilWeights::new(alpha, gamma, tensor)?;
    weights.apply(u)
}
