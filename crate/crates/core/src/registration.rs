//! Cubic B-spline free-form deformation registration, bilinear warping with
//! its exact adjoint, and fixed-point field inversion.
//!
//! Displacements use the same axis naming as [`crate::grid`]: `dx` moves along
//! rows (vertical), `dy` along columns (horizontal). A field `f` acts on an
//! image by pull-back sampling, `warp(u, f)(x) = u(x + f(x))`.

use std::io::{Read, Write};

use log::debug;
use rayon::prelude::*;

use crate::error::{ensure_same_shape, invalid, Error, Result};
use crate::grid::Image;

/// What a field is used for; the sampling rule is the same for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldDirection {
    /// Warps the reference toward an observed frame.
    PullBack,
    /// Warps an observed frame toward the reference.
    PushForward,
}

/// Per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub dx: Image,
    pub dy: Image,
    pub direction: FieldDirection,
}

impl DeformationField {
    pub fn zeros(width: usize, height: usize, direction: FieldDirection) -> Self {
        Self {
            dx: Image::zeros(width, height),
            dy: Image::zeros(width, height),
            direction,
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64, direction: FieldDirection) -> Self {
        Self {
            dx: Image::filled(width, height, dx),
            dy: Image::filled(width, height, dy),
            direction,
        }
    }

    pub fn new(dx: Image, dy: Image, direction: FieldDirection) -> Result<Self> {
        ensure_same_shape(dx.shape(), dy.shape())?;
        if !(dx.all_finite() && dy.all_finite()) {
            return Err(invalid("deformation field has non-finite entries"));
        }
        Ok(Self { dx, dy, direction })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dx.shape()
    }

    /// Largest displacement length.
    pub fn max_norm(&self) -> f64 {
        self.dx
            .data()
            .iter()
            .zip(self.dy.data())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Mean displacement `(dx, dy)`.
    pub fn mean(&self) -> (f64, f64) {
        (self.dx.mean(), self.dy.mean())
    }

    /// Writes the `dx` then `dy` plane as row-major little-endian `f32`.
    pub fn write_raw<W: Write>(&self, mut out: W) -> Result<()> {
        for plane in [&self.dx, &self.dy] {
            for &v in plane.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(
        mut input: R,
        width: usize,
        height: usize,
        direction: FieldDirection,
    ) -> Result<Self> {
        let n = width * height;
        let mut bytes = vec![0u8; 8 * n];
        input.read_exact(&mut bytes)?;
        let plane = |k: usize| -> Vec<f64> {
            bytes[4 * n * k..4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        };
        Self::new(
            Image::new(width, height, plane(0))?,
            Image::new(width, height, plane(1))?,
            direction,
        )
    }
}

/// Bilinear sample location with clamped coordinates: the four source
/// pixels and their weights.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fi: f64,
    fj: f64,
    clamped_i: bool,
    clamped_j: bool,
}

#[inline]
fn axis_tap(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let i0 = (p.floor() as usize).min(n.saturating_sub(2));
    let f = p - i0 as f64;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f, clamped)
}

#[inline]
fn tap(i: usize, j: usize, dx: f64, dy: f64, w: usize, h: usize) -> Tap {
    let (i0, i1, fi, clamped_i) = axis_tap(i as f64 + dx, h);
    let (j0, j1, fj, clamped_j) = axis_tap(j as f64 + dy, w);
    Tap {
        i0,
        i1,
        j0,
        j1,
        fi,
        fj,
        clamped_i,
        clamped_j,
    }
}

#[inline]
fn sample(d: &[f64], w: usize, t: &Tap) -> f64 {
    let a = d[t.i0 * w + t.j0];
    let b = d[t.i0 * w + t.j1];
    let c = d[t.i1 * w + t.j0];
    let e = d[t.i1 * w + t.j1];
    (1.0 - t.fi) * ((1.0 - t.fj) * a + t.fj * b) + t.fi * ((1.0 - t.fj) * c + t.fj * e)
}

/// Samples `u` at `x + f(x)` bilinearly; positions outside the image clamp to
/// the nearest edge pixel.
pub fn warp(u: &Image, f: &DeformationField) -> Result<Image> {
    ensure_same_shape(u.shape(), f.shape())?;
    let (w, h) = u.shape();
    let d = u.data();
    let (fx, fy) = (f.dx.data(), f.dy.data());
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (j, o) in row.iter_mut().enumerate() {
            let k = i * w + j;
            if fx[k] == 0.0 && fy[k] == 0.0 {
                *o = d[k];
            } else {
                *o = sample(d, w, &tap(i, j, fx[k], fy[k], w, h));
            }
        }
    });
    Image::new(w, h, out)
}

/// Exact transpose of [`warp`]: scatters each value onto its four source
/// pixels with the bilinear weights.
pub fn warp_adj(v: &Image, f: &DeformationField) -> Result<Image> {
    ensure_same_shape(v.shape(), f.shape())?;
    let (w, h) = v.shape();
    let d = v.data();
    let (fx, fy) = (f.dx.data(), f.dy.data());
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let val = d[k];
            if fx[k] == 0.0 && fy[k] == 0.0 {
                out[k] += val;
                continue;
            }
            let t = tap(i, j, fx[k], fy[k], w, h);
            out[t.i0 * w + t.j0] += (1.0 - t.fi) * (1.0 - t.fj) * val;
            out[t.i0 * w + t.j1] += (1.0 - t.fi) * t.fj * val;
            out[t.i1 * w + t.j0] += t.fi * (1.0 - t.fj) * val;
            out[t.i1 * w + t.j1] += t.fi * t.fj * val;
        }
    }
    Image::new(w, h, out)
}

/// Warped image together with its derivative with respect to the
/// displacement at every pixel.
fn warp_with_gradient(u: &Image, fx: &[f64], fy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = u.shape();
    let d = u.data();
    let n = w * h;
    let mut val = vec![0.0; n];
    let mut gi = vec![0.0; n];
    let mut gj = vec![0.0; n];
    val.par_chunks_mut(w)
        .zip(gi.par_chunks_mut(w))
        .zip(gj.par_chunks_mut(w))
        .enumerate()
        .for_each(|(i, ((vr, gir), gjr))| {
            for j in 0..w {
                let k = i * w + j;
                let t = tap(i, j, fx[k], fy[k], w, h);
                vr[j] = sample(d, w, &t);
                let a = d[t.i0 * w + t.j0];
                let b = d[t.i0 * w + t.j1];
                let c = d[t.i1 * w + t.j0];
                let e = d[t.i1 * w + t.j1];
                gir[j] = if t.clamped_i || t.i0 == t.i1 {
                    0.0
                } else {
                    (1.0 - t.fj) * (c - a) + t.fj * (e - b)
                };
                gjr[j] = if t.clamped_j || t.j0 == t.j1 {
                    0.0
                } else {
                    (1.0 - t.fi) * (b - a) + t.fi * (e - c)
                };
            }
        });
    (val, gi, gj)
}

/// Result of [`invert_field`].
#[derive(Debug, Clone)]
pub struct FieldInverse {
    pub field: DeformationField,
    /// Mean of `|f(x + g(x)) + g(x)|` over pixels.
    pub residual: f64,
}

/// Approximate inverse by the fixed point `g ← -f(x + g(x))`, sampling `f`
/// bilinearly. The direction tag flips.
pub fn invert_field(f: &DeformationField, iters: usize) -> FieldInverse {
    let (w, h) = f.shape();
    let direction = match f.direction {
        FieldDirection::PullBack => FieldDirection::PushForward,
        FieldDirection::PushForward => FieldDirection::PullBack,
    };
    let (fx, fy) = (f.dx.data(), f.dy.data());
    let mut gx: Vec<f64> = fx.iter().map(|v| -v).collect();
    let mut gy: Vec<f64> = fy.iter().map(|v| -v).collect();
    let compose = |gx: &[f64], gy: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut sx = vec![0.0; w * h];
        let mut sy = vec![0.0; w * h];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let t = tap(i, j, gx[k], gy[k], w, h);
                sx[k] = sample(fx, w, &t);
                sy[k] = sample(fy, w, &t);
            }
        }
        (sx, sy)
    };
    for _ in 1..iters {
        let (sx, sy) = compose(&gx, &gy);
        gx = sx.iter().map(|v| -v).collect();
        gy = sy.iter().map(|v| -v).collect();
    }
    let (sx, sy) = compose(&gx, &gy);
    let residual = (0..w * h)
        .map(|k| (sx[k] + gx[k]).hypot(sy[k] + gy[k]))
        .sum::<f64>()
        / (w * h) as f64;
    let field = DeformationField {
        dx: Image::new(w, h, gx).expect("shape preserved"),
        dy: Image::new(w, h, gy).expect("shape preserved"),
        direction,
    };
    FieldInverse { field, residual }
}

/// Control lattice of a cubic B-spline deformation. Control point `(a, b)`
/// sits at pixel `((a-1)·s, (b-1)·s)`, so the lattice extends one cell
/// before the image and two past its last pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BsplineGrid {
    spacing: f64,
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    /// Row-major control displacements in pixels.
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl BsplineGrid {
    pub fn zeros(width: usize, height: usize, spacing: usize) -> Result<Self> {
        if spacing == 0 {
            return Err(invalid("control spacing must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("empty image"));
        }
        let rows = (height - 1) / spacing + 4;
        let cols = (width - 1) / spacing + 4;
        Ok(Self {
            spacing: spacing as f64,
            width,
            height,
            rows,
            cols,
            dx: vec![0.0; rows * cols],
            dy: vec![0.0; rows * cols],
        })
    }

    /// Lattice dimensions `(rows, cols)`.
    pub fn lattice(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[inline]
fn bspline_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Basis support of one image axis sampled at `positions` (in fine pixels).
struct AxisBasis {
    cell: Vec<usize>,
    weight: Vec<[f64; 4]>,
}

impl AxisBasis {
    fn new(positions: impl Iterator<Item = f64>, spacing: f64, extent: usize) -> Self {
        let max = (extent - 1) as f64;
        let (cell, weight) = positions
            .map(|p| {
                let t = p.clamp(0.0, max) / spacing;
                let c = t.floor();
                (c as usize, bspline_weights(t - c))
            })
            .unzip();
        Self { cell, weight }
    }

    fn identity(extent: usize, spacing: f64) -> Self {
        Self::new((0..extent).map(|i| i as f64), spacing, extent)
    }
}

/// Evaluates one displacement plane: `out = scale · B φ`.
fn expand(phi: &[f64], cols: usize, rb: &AxisBasis, cb: &AxisBasis, scale: f64) -> Vec<f64> {
    let w = cb.cell.len();
    let mut out = vec![0.0; rb.cell.len() * w];
    out.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        let mut tmp = vec![0.0; cols];
        let ci = rb.cell[i];
        for (l, &wl) in rb.weight[i].iter().enumerate() {
            let src = &phi[(ci + l) * cols..(ci + l + 1) * cols];
            for (t, &s) in tmp.iter_mut().zip(src) {
                *t += wl * s;
            }
        }
        for (j, o) in row.iter_mut().enumerate() {
            let cj = cb.cell[j];
            let wj = &cb.weight[j];
            *o = scale * (wj[0] * tmp[cj] + wj[1] * tmp[cj + 1] + wj[2] * tmp[cj + 2] + wj[3] * tmp[cj + 3]);
        }
    });
    out
}

/// Transpose of [`expand`], accumulated into `grad`.
fn expand_adj(g: &[f64], rows: usize, cols: usize, rb: &AxisBasis, cb: &AxisBasis, scale: f64, grad: &mut [f64]) {
    let w = cb.cell.len();
    let mut acc = vec![0.0; rows * cols];
    let mut tmp = vec![0.0; cols];
    for i in 0..rb.cell.len() {
        tmp.iter_mut().for_each(|t| *t = 0.0);
        for j in 0..w {
            let v = g[i * w + j];
            if v == 0.0 {
                continue;
            }
            let cj = cb.cell[j];
            for m in 0..4 {
                tmp[cj + m] += cb.weight[j][m] * v;
            }
        }
        let ci = rb.cell[i];
        for l in 0..4 {
            let wl = rb.weight[i][l] * scale;
            let dst = &mut acc[(ci + l) * cols..(ci + l + 1) * cols];
            for (d, &t) in dst.iter_mut().zip(&tmp) {
                *d += wl * t;
            }
        }
    }
    for (gr, a) in grad.iter_mut().zip(acc) {
        *gr += a;
    }
}

/// Dense field of a control lattice (cubic B-spline tensor expansion).
pub fn field_from_grid(g: &BsplineGrid, direction: FieldDirection) -> DeformationField {
    let rb = AxisBasis::identity(g.height, g.spacing);
    let cb = AxisBasis::identity(g.width, g.spacing);
    let dx = expand(&g.dx, g.cols, &rb, &cb, 1.0);
    let dy = expand(&g.dy, g.cols, &rb, &cb, 1.0);
    DeformationField {
        dx: Image::new(g.width, g.height, dx).expect("lattice matches shape"),
        dy: Image::new(g.width, g.height, dy).expect("lattice matches shape"),
        direction,
    }
}

/// Registration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    /// Control point spacing in pixels.
    pub spacing: usize,
    /// Pyramid levels, coarsest first during optimization.
    pub levels: usize,
    /// Weight of the bending energy.
    pub beta: f64,
    /// Descent iterations per level.
    pub iterations: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            spacing: 16,
            levels: 3,
            beta: 0.01,
            iterations: 40,
        }
    }
}

/// Registration outcome with before/after fit.
#[derive(Debug, Clone)]
pub struct RegistrationReport {
    pub grid: BsplineGrid,
    /// Mean squared difference with zero displacement.
    pub initial_ssd: f64,
    pub final_ssd: f64,
    pub accepted_steps: usize,
}

/// 2×2 box downsampling; an odd trailing row or column averages what exists.
fn downsample(u: &Image) -> Image {
    let (w, h) = u.shape();
    let (w2, h2) = (w.div_ceil(2), h.div_ceil(2));
    Image::from_fn(w2, h2, |i, j| {
        let mut s = 0.0;
        let mut c = 0.0;
        for a in 2 * i..(2 * i + 2).min(h) {
            for b in 2 * j..(2 * j + 2).min(w) {
                s += u.get(a, b);
                c += 1.0;
            }
        }
        s / c
    })
}

/// Squared second differences of the lattice (bending energy) and its gradient.
fn bending(phi: &[f64], rows: usize, cols: usize, grad: Option<&mut [f64]>, weight: f64) -> f64 {
    let mut e = 0.0;
    let mut g = vec![0.0; phi.len()];
    let at = |a: usize, b: usize| a * cols + b;
    let mut add = |idx: [usize; 3], coef: [f64; 3], mult: f64, e: &mut f64| {
        let d: f64 = (0..3).map(|k| coef[k] * phi[idx[k]]).sum();
        *e += mult * d * d;
        for k in 0..3 {
            g[idx[k]] += 2.0 * mult * d * coef[k];
        }
    };
    for a in 0..rows {
        for b in 0..cols {
            if a >= 1 && a + 1 < rows {
                add([at(a - 1, b), at(a, b), at(a + 1, b)], [1.0, -2.0, 1.0], 1.0, &mut e);
            }
            if b >= 1 && b + 1 < cols {
                add([at(a, b - 1), at(a, b), at(a, b + 1)], [1.0, -2.0, 1.0], 1.0, &mut e);
            }
        }
    }
    // Mixed term 2·(φ_ab)² with the four-point cross difference.
    for a in 0..rows.saturating_sub(1) {
        for b in 0..cols.saturating_sub(1) {
            let idx = [at(a, b), at(a, b + 1), at(a + 1, b), at(a + 1, b + 1)];
            let coef = [1.0, -1.0, -1.0, 1.0];
            let d: f64 = (0..4).map(|k| coef[k] * phi[idx[k]]).sum();
            e += 2.0 * d * d;
            for k in 0..4 {
                g[idx[k]] += 4.0 * d * coef[k];
            }
        }
    }
    let norm = weight / (rows * cols) as f64;
    if let Some(grad) = grad {
        for (gr, v) in grad.iter_mut().zip(g) {
            *gr += norm * v;
        }
    }
    norm * e
}

struct Level {
    moving: Image,
    fixed: Image,
    rb: AxisBasis,
    cb: AxisBasis,
    scale: f64,
}

impl Level {
    /// Objective, SSD part, and gradient with respect to both lattices.
    fn evaluate(&self, grid: &BsplineGrid, beta: f64, want_grad: bool) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let inv = 1.0 / self.scale;
        let fx = expand(&grid.dx, grid.cols, &self.rb, &self.cb, inv);
        let fy = expand(&grid.dy, grid.cols, &self.rb, &self.cb, inv);
        let (val, gi, gj) = warp_with_gradient(&self.moving, &fx, &fy);
        let n = val.len() as f64;
        let resid: Vec<f64> = val.iter().zip(self.fixed.data()).map(|(a, b)| a - b).collect();
        let ssd = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let bend_w = beta / (grid.spacing * grid.spacing);
        let mut gx = vec![0.0; grid.dx.len()];
        let mut gy = vec![0.0; grid.dy.len()];
        let mut obj = 0.5 * ssd;
        if want_grad {
            let dfx: Vec<f64> = resid.iter().zip(&gi).map(|(r, g)| r * g / n).collect();
            let dfy: Vec<f64> = resid.iter().zip(&gj).map(|(r, g)| r * g / n).collect();
            expand_adj(&dfx, grid.rows, grid.cols, &self.rb, &self.cb, inv, &mut gx);
            expand_adj(&dfy, grid.rows, grid.cols, &self.rb, &self.cb, inv, &mut gy);
            obj += bending(&grid.dx, grid.rows, grid.cols, Some(&mut gx), bend_w);
            obj += bending(&grid.dy, grid.rows, grid.cols, Some(&mut gy), bend_w);
        } else {
            obj += bending(&grid.dx, grid.rows, grid.cols, None, bend_w);
            obj += bending(&grid.dy, grid.rows, grid.cols, None, bend_w);
        }
        (obj, ssd, gx, gy)
    }
}

/// Registers `moving` onto `fixed`: the returned lattice gives a field `f`
/// with `warp(moving, f) ≈ fixed`.
pub fn register(moving: &Image, fixed: &Image, cfg: &RegistrationConfig) -> Result<BsplineGrid> {
    register_detailed(moving, fixed, cfg).map(|r| r.grid)
}

pub fn register_detailed(moving: &Image, fixed: &Image, cfg: &RegistrationConfig) -> Result<RegistrationReport> {
    ensure_same_shape(fixed.shape(), moving.shape())?;
    if cfg.levels == 0 {
        return Err(invalid("registration needs at least one level"));
    }
    if !(cfg.beta >= 0.0) {
        return Err(invalid("bending weight must be nonnegative"));
    }
    let (w, h) = moving.shape();
    let mut grid = BsplineGrid::zeros(w, h, cfg.spacing)?;

    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    for _ in 1..cfg.levels {
        let (m, f) = pyramid.last().expect("non-empty");
        if m.width() < 8 || m.height() < 8 {
            break;
        }
        pyramid.push((downsample(m), downsample(f)));
    }

    let initial_ssd = moving
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / moving.len() as f64;
    let mut accepted_steps = 0;
    let mut final_ssd = initial_ssd;

    for (lvl, (m, f)) in pyramid.into_iter().enumerate().rev() {
        let scale = (1usize << lvl) as f64;
        let offset = (scale - 1.0) / 2.0;
        let level = Level {
            rb: AxisBasis::new((0..m.height()).map(|i| i as f64 * scale + offset), grid.spacing, h),
            cb: AxisBasis::new((0..m.width()).map(|j| j as f64 * scale + offset), grid.spacing, w),
            moving: m,
            fixed: f,
            scale,
        };
        let (mut obj, mut ssd, mut gx, mut gy) = level.evaluate(&grid, cfg.beta, true);
        let mut step: Option<f64> = None;
        let mut ssd_increases = 0;
        for _ in 0..cfg.iterations {
            let gnorm2: f64 = gx.iter().chain(&gy).map(|v| v * v).sum();
            let ginf = gx.iter().chain(&gy).fold(0.0f64, |a, v| a.max(v.abs()));
            if ginf == 0.0 {
                break;
            }
            // Start with a step that moves control points by up to 0.5 px.
            let mut alpha = step.map_or(0.5 * scale / ginf, |s| 2.0 * s);
            let mut accepted = None;
            while alpha * ginf > 1e-4 {
                let mut trial = grid.clone();
                trial.dx.iter_mut().zip(&gx).for_each(|(p, g)| *p -= alpha * g);
                trial.dy.iter_mut().zip(&gy).for_each(|(p, g)| *p -= alpha * g);
                let (t_obj, t_ssd, _, _) = level.evaluate(&trial, cfg.beta, false);
                if t_obj <= obj - 1e-4 * alpha * gnorm2 {
                    accepted = Some((trial, t_obj, t_ssd));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, t_obj, t_ssd)) = accepted else {
                break;
            };
            if t_ssd > ssd {
                ssd_increases += 1;
                if ssd_increases >= 10 {
                    return Err(Error::RegistrationDiverged(format!(
                        "SSD rose for 10 consecutive accepted steps at level {lvl} (now {t_ssd:.4e}, start {initial_ssd:.4e})"
                    )));
                }
            } else {
                ssd_increases = 0;
            }
            accepted_steps += 1;
            step = Some(alpha);
            let converged = (obj - t_obj) <= 1e-9 * obj.abs().max(1e-12);
            grid = trial;
            let (o, s, a, b) = level.evaluate(&grid, cfg.beta, true);
            obj = o;
            ssd = s;
            gx = a;
            gy = b;
            if converged {
                break;
            }
        }
        debug!("registration level {lvl}: ssd {ssd:.4e}");
        if lvl == 0 {
            final_ssd = ssd;
        }
    }
    let limit = ((w * w + h * h) as f64).sqrt();
    if grid.dx.iter().chain(&grid.dy).any(|v| !v.is_finite() || v.abs() > limit) {
        return Err(Error::RegistrationDiverged("displacements left the image".into()));
    }
    Ok(RegistrationReport {
        grid,
        initial_ssd,
        final_ssd,
        accepted_steps,
    })
}

/// Registers every frame onto `fixed` in parallel, returning pull-back
/// style fields that warp each frame toward `fixed`.
pub fn register_all(
    frames: &[Image],
    fixed: &Image,
    cfg: &RegistrationConfig,
    direction: FieldDirection,
) -> Result<Vec<DeformationField>> {
    frames
        .par_iter()
        .map(|f| register(f, fixed, cfg).map(|g| field_from_grid(&g, direction)))
        .collect()
}

/// Registers `reference` onto every frame, giving the pull-back fields of
/// the observation operators.
pub fn register_reference_to_frames(
    reference: &Image,
    frames: &[Image],
    cfg: &RegistrationConfig,
) -> Result<Vec<DeformationField>> {
    frames
        .par_iter()
        .map(|f| register(reference, f, cfg).map(|g| field_from_grid(&g, FieldDirection::PullBack)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |i, j| {
            let (x, y) = (i as f64, j as f64);
            0.5 + 0.2 * (x / 7.0).sin() * (y / 9.0).cos() + 0.15 * ((x + 2.0 * y) / 11.0).sin()
        })
    }

    fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize, amp: f64) -> DeformationField {
        DeformationField {
            dx: Image::from_fn(w, h, |_, _| rng.random_range(-amp..amp)),
            dy: Image::from_fn(w, h, |_, _| rng.random_range(-amp..amp)),
            direction: FieldDirection::PullBack,
        }
    }

    /// Samples `u(x + t)` analytically for the smooth test image.
    fn shifted(u: impl Fn(f64, f64) -> f64, w: usize, h: usize, ti: f64, tj: f64) -> Image {
        Image::from_fn(w, h, |i, j| u(i as f64 + ti, j as f64 + tj))
    }

    fn smooth_fn(x: f64, y: f64) -> f64 {
        0.5 + 0.2 * (x / 7.0).sin() * (y / 9.0).cos() + 0.15 * ((x + 2.0 * y) / 11.0).sin()
    }

    #[test]
    fn zero_field_is_identity_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Image::from_fn(9, 7, |_, _| rng.random_range(0.0..1.0));
        let z = DeformationField::zeros(9, 7, FieldDirection::PullBack);
        assert_eq!(warp(&u, &z).unwrap(), u);
        assert_eq!(warp_adj(&u, &z).unwrap(), u);
        let ones = Image::filled(9, 7, 1.0);
        assert_eq!(warp_adj(&ones, &z).unwrap(), ones);
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let u = Image::from_fn(6, 6, |i, j| (i * 6 + j) as f64);
        let f = DeformationField::constant(6, 6, -1.0, 0.0, FieldDirection::PullBack);
        let out = warp(&u, &f).unwrap();
        for i in 1..6 {
            for j in 0..6 {
                assert_eq!(out.get(i, j), u.get(i - 1, j));
            }
        }
        // The first row clamps onto the edge row.
        assert_eq!(out.row(0), u.row(0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let u = Image::zeros(4, 4);
        let f = DeformationField::zeros(4, 5, FieldDirection::PullBack);
        assert!(warp(&u, &f).is_err());
        assert!(warp_adj(&u, &f).is_err());
        assert!(register(&u, &Image::zeros(5, 4), &RegistrationConfig::default()).is_err());
    }

    #[test]
    fn grid_field_basis_properties() {
        let g = BsplineGrid::zeros(40, 33, 8).unwrap();
        let f = field_from_grid(&g, FieldDirection::PullBack);
        assert_eq!(f.max_norm(), 0.0);

        let mut c = g.clone();
        c.dx.iter_mut().for_each(|v| *v = 1.5);
        c.dy.iter_mut().for_each(|v| *v = -0.5);
        let f = field_from_grid(&c, FieldDirection::PullBack);
        assert!(f.dx.data().iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(f.dy.data().iter().all(|v| (v + 0.5).abs() < 1e-12));

        // One control point at pixel (16, 8): lattice index (3, 2).
        let mut b = g.clone();
        let (_, cols) = b.lattice();
        b.dx[3 * cols + 2] = 1.0;
        let f = field_from_grid(&b, FieldDirection::PullBack);
        let peak = f.dx.get(16, 8);
        assert!((peak - 4.0 / 9.0).abs() < 1e-12);
        assert!(f.dx.data().iter().all(|&v| v <= peak + 1e-15 && v >= 0.0));
        // Separable: the value at (16+4, 8) is B(0.5)·B(0), B(0.5) = 23/48.
        assert!((f.dx.get(20, 8) - (23.0 / 48.0) * (4.0 / 6.0)).abs() < 1e-12);
        assert_eq!(f.dx.get(16 + 16, 8), 0.0);
    }

    #[test]
    fn expand_adjoint_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = BsplineGrid::zeros(23, 19, 5).unwrap();
        let (rows, cols) = g.lattice();
        let rb = AxisBasis::new((0..10).map(|i| i as f64 * 2.0 + 0.5), 5.0, 19);
        let cb = AxisBasis::new((0..12).map(|j| j as f64 * 2.0 + 0.5), 5.0, 23);
        let phi: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = expand(&phi, cols, &rb, &cb, 0.5).iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut adj = vec![0.0; rows * cols];
        expand_adj(&r, rows, cols, &rb, &cb, 0.5, &mut adj);
        let rhs: f64 = adj.iter().zip(&phi).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (w, h) = (24, 20);
        let moving = smooth_image(w, h);
        let fixed = shifted(smooth_fn, w, h, 0.7, -0.4);
        let mut grid = BsplineGrid::zeros(w, h, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        grid.dx.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        grid.dy.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        let level = Level {
            rb: AxisBasis::identity(h, 8.0),
            cb: AxisBasis::identity(w, 8.0),
            moving,
            fixed,
            scale: 1.0,
        };
        let (_, _, gx, gy) = level.evaluate(&grid, 0.5, true);
        for k in [0usize, 7, 13] {
            for (plane, grad) in [(0, &gx), (1, &gy)] {
                let eps = 1e-6;
                let mut p = grid.clone();
                let mut m = grid.clone();
                if plane == 0 {
                    p.dx[k] += eps;
                    m.dx[k] -= eps;
                } else {
                    p.dy[k] += eps;
                    m.dy[k] -= eps;
                }
                let fd = (level.evaluate(&p, 0.5, false).0 - level.evaluate(&m, 0.5, false).0) / (2.0 * eps);
                assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-6), "k {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn identical_images_give_near_zero_field() {
        let u = smooth_image(48, 40);
        let g = register(&u, &u, &RegistrationConfig::default()).unwrap();
        let f = field_from_grid(&g, FieldDirection::PullBack);
        assert!(f.max_norm() < 0.05);
    }

    #[test]
    fn recovers_horizontal_shift() {
        let (w, h) = (64, 64);
        let moving = Image::from_fn(w, h, |i, j| smooth_fn(i as f64, j as f64));
        let fixed = shifted(smooth_fn, w, h, 0.0, 2.0);
        let g = register(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        let f = field_from_grid(&g, FieldDirection::PullBack);
        let (mx, my) = f.mean();
        assert!((my - 2.0).abs() < 0.3, "mean dy {my}");
        assert!(mx.abs() < 0.3, "mean dx {mx}");
    }

    #[test]
    fn reduces_ssd_on_warped_checker() {
        let (w, h) = (64, 64);
        let checker = |x: f64, y: f64| {
            let s = (x / 8.0).floor() as i64 + (y / 8.0).floor() as i64;
            if s.rem_euclid(2) == 0 { 0.2 } else { 0.8 }
        };
        let moving = Image::from_fn(w, h, |i, j| checker(i as f64, j as f64));
        let fixed = Image::from_fn(w, h, |i, j| {
            let (x, y) = (i as f64, j as f64);
            checker(x + 1.5 * (y / 10.0).sin(), y + 1.5 * (x / 12.0).cos())
        });
        let r = register_detailed(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        assert!(r.final_ssd < 0.2 * r.initial_ssd, "{} vs {}", r.final_ssd, r.initial_ssd);
    }

    #[test]
    fn inversion_examples() {
        let z = DeformationField::zeros(10, 10, FieldDirection::PushForward);
        let inv = invert_field(&z, 20);
        assert_eq!(inv.field.max_norm(), 0.0);
        assert_eq!(inv.field.direction, FieldDirection::PullBack);

        let t = DeformationField::constant(10, 10, 1.25, -0.5, FieldDirection::PullBack);
        let inv = invert_field(&t, 20);
        assert!(inv.field.dx.data().iter().all(|v| (v + 1.25).abs() < 1e-12));
        assert!(inv.field.dy.data().iter().all(|v| (v - 0.5).abs() < 1e-12));

        let (w, h) = (48, 48);
        let f = DeformationField {
            dx: Image::from_fn(w, h, |i, j| 1.5 * ((i as f64) / 9.0).sin() * ((j as f64) / 13.0).cos()),
            dy: Image::from_fn(w, h, |i, j| 1.2 * ((i as f64 + j as f64) / 11.0).cos()),
            direction: FieldDirection::PushForward,
        };
        let inv = invert_field(&f, 20);
        assert!(inv.residual < 0.1, "residual {}", inv.residual);
    }

    #[test]
    fn raw_field_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 5, 4, 2.0);
        let mut buf = Vec::new();
        f.write_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 2 * 4 * 20);
        let back = DeformationField::read_raw(buf.as_slice(), 5, 4, FieldDirection::PullBack).unwrap();
        assert!(back.dx.max_abs_diff(&f.dx) < 1e-6);
        assert!(back.dy.max_abs_diff(&f.dy) < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn warp_adjointness(seed in any::<u64>(), w in 2usize..20, h in 2usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = random_field(&mut rng, w, h, 3.0);
                let u = Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
                let v = Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
                let lhs = warp(&u, &f).unwrap().dot(&v);
                let rhs = u.dot(&warp_adj(&v, &f).unwrap());
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }

            #[test]
            fn constant_control_field_is_constant(d in -5.0f64..5.0, s in 4usize..20) {
                let mut g = BsplineGrid::zeros(37, 29, s).unwrap();
                g.dx.iter_mut().for_each(|v| *v = d);
                let f = field_from_grid(&g, FieldDirection::PullBack);
                prop_assert!(f.dx.data().iter().all(|v| (v - d).abs() < 1e-12));
            }
        }
    }
}
