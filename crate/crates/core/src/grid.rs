//! Single-channel images and the finite-difference operators used by every solver.
//!
//! Axis convention: the row index `i` is the vertical axis and is the one
//! `grad_x` differentiates along; the column index `j` is horizontal and is
//! handled by `grad_y`. Forward differences are zero on the first row
//! (`grad_x`) or first column (`grad_y`), and the adjoints are the exact
//! matrix transposes of those operators.

use crate::error::{ensure_same_shape, invalid, Result};

/// Row-major grid of real intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(invalid(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(invalid("ragged rows"));
        }
        Self::new(width, height, rows.concat())
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    /// Zero image with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width, self.height)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    /// Value at `(i, j)` with both coordinates clamped into the grid.
    #[inline]
    pub fn get_clamped(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.data[i * self.width + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_shape(self.shape(), other.shape())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// `max |self - other|`.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Image) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Horizontal and vertical forward differences of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub gx: Image,
    pub gy: Image,
}

impl GradientPair {
    pub fn of(u: &Image) -> Self {
        Self {
            gx: grad_x(u),
            gy: grad_y(u),
        }
    }
}

/// Vertical forward difference: zero on the first row, `u(i,j) - u(i-1,j)` below.
pub fn grad_x(u: &Image) -> Image {
    let mut out = u.zeros_like();
    grad_x_into(u, &mut out);
    out
}

pub(crate) fn grad_x_into(u: &Image, out: &mut Image) {
    let w = u.width;
    let (src, dst) = (&u.data, &mut out.data);
    dst[..w].iter_mut().for_each(|v| *v = 0.0);
    for k in w..src.len() {
        dst[k] = src[k] - src[k - w];
    }
}

/// Horizontal forward difference: zero on the first column, `u(i,j) - u(i,j-1)` elsewhere.
pub fn grad_y(u: &Image) -> Image {
    let mut out = u.zeros_like();
    grad_y_into(u, &mut out);
    out
}

pub(crate) fn grad_y_into(u: &Image, out: &mut Image) {
    let w = u.width;
    for (src, dst) in u.data.chunks_exact(w).zip(out.data.chunks_exact_mut(w)) {
        dst[0] = 0.0;
        for j in 1..w {
            dst[j] = src[j] - src[j - 1];
        }
    }
}

/// Transpose of [`grad_x`]: `-p(2,j)` on the first row, `p(i,j) - p(i+1,j)`
/// in the interior and `p(N,j)` on the last row (1-based rows).
pub fn grad_x_adj(p: &Image) -> Image {
    let mut out = p.zeros_like();
    grad_x_adj_into(p, &mut out);
    out
}

pub(crate) fn grad_x_adj_into(p: &Image, out: &mut Image) {
    let (w, h) = (p.width, p.height);
    let (src, dst) = (&p.data, &mut out.data);
    if h == 1 {
        dst.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for j in 0..w {
        dst[j] = -src[w + j];
    }
    for i in 1..h - 1 {
        let base = i * w;
        for j in 0..w {
            dst[base + j] = src[base + j] - src[base + w + j];
        }
    }
    let last = (h - 1) * w;
    dst[last..last + w].copy_from_slice(&src[last..last + w]);
}

/// Transpose of [`grad_y`], the column-wise mirror of [`grad_x_adj`].
pub fn grad_y_adj(p: &Image) -> Image {
    let mut out = p.zeros_like();
    grad_y_adj_into(p, &mut out);
    out
}

pub(crate) fn grad_y_adj_into(p: &Image, out: &mut Image) {
    let w = p.width;
    for (src, dst) in p.data.chunks_exact(w).zip(out.data.chunks_exact_mut(w)) {
        if w == 1 {
            dst[0] = 0.0;
            continue;
        }
        dst[0] = -src[1];
        for j in 1..w - 1 {
            dst[j] = src[j] - src[j + 1];
        }
        dst[w - 1] = src[w - 1];
    }
}

/// `grad_x_adj(gx) + grad_y_adj(gy)` accumulated in one pass.
pub(crate) fn grad_adj_sum_into(gx: &Image, gy: &Image, out: &mut Image) {
    grad_x_adj_into(gx, out);
    let w = gy.width;
    for (src, dst) in gy.data.chunks_exact(w).zip(out.data.chunks_exact_mut(w)) {
        if w == 1 {
            continue;
        }
        dst[0] -= src[1];
        for j in 1..w - 1 {
            dst[j] += src[j] - src[j + 1];
        }
        dst[w - 1] += src[w - 1];
    }
}

/// Discrete Laplacian `-grad_xᵀ grad_x u - grad_yᵀ grad_y u` (negative semi-definite).
pub fn laplacian(u: &Image) -> Image {
    let mut out = u.zeros_like();
    laplacian_into(u, &mut out);
    out
}

/// Direct five-point stencil with the Neumann-type boundary implied by the
/// difference operators; agrees with the two-operator composition exactly.
pub(crate) fn laplacian_into(u: &Image, out: &mut Image) {
    let (w, h) = (u.width, u.height);
    let s = &u.data;
    let d = &mut out.data;
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let c = s[k];
            let mut acc = 0.0;
            if i > 0 {
                acc += s[k - w] - c;
            }
            if i + 1 < h {
                acc += s[k + w] - c;
            }
            if j > 0 {
                acc += s[k - 1] - c;
            }
            if j + 1 < w {
                acc += s[k + 1] - c;
            }
            d[k] = acc;
        }
    }
}

/// Clamp `c` into `[-t, t]`. Requires `t > 0`.
pub fn cut(c: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(format!("cut threshold must be positive, got {t}")));
    }
    Ok(clamp_sym(c, t))
}

/// Soft threshold `sign(x) * max(|x| - g, 0)` with `sign(0) = 0`. Requires `g > 0`.
pub fn shrink(x: f64, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(invalid(format!("shrink threshold must be positive, got {g}")));
    }
    Ok(soft_threshold(x, g))
}

#[inline]
pub(crate) fn clamp_sym(c: f64, t: f64) -> f64 {
    if c > t {
        t
    } else if c < -t {
        -t
    } else {
        c
    }
}

/// Written as `x - clamp(x)` so that `shrink + cut == x` holds bit-exactly.
#[inline]
pub(crate) fn soft_threshold(x: f64, g: f64) -> f64 {
    x - clamp_sym(x, g)
}
