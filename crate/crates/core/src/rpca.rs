//! Low-rank plus sparse decomposition of a frame stack by the inexact
//! augmented Lagrange multiplier method, and the reference image built from
//! the low-rank part.

use log::{debug, warn};
use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::grid::{soft_threshold, Image};

/// Outcome of [`rpca_decompose`].
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub iterations: usize,
    /// `‖G − L − S‖_F / ‖G‖_F` at exit.
    pub primal_residual: f64,
    pub converged: bool,
    /// `‖L‖_* + λ‖G − L‖_1` after each iteration, the objective at the
    /// feasible point obtained by moving the residual into the sparse part.
    pub objective_history: Vec<f64>,
    pub lambda: f64,
}

/// Options for [`rpca_decompose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpcaOptions {
    /// Sparsity weight; `None` selects `1/sqrt(max(m, n))`.
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RpcaOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            tol: 1e-7,
            max_iter: 500,
        }
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid("matrix has non-finite entries"))
    }
}

/// Singular value thresholding `U·shrink(Σ, τ)·Vᵀ`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return Err(invalid(format!("svt threshold {tau} must be nonnegative")));
    }
    check_finite(m)?;
    Ok(svt_unchecked(m, tau).0)
}

/// Returns the thresholded matrix and its nuclear norm.
fn svt_unchecked(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (m.clone(), 0.0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut out = DMatrix::zeros(rows, cols);
    let mut nuclear = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let t = s - tau;
        if t <= 0.0 {
            continue;
        }
        nuclear += t;
        out.ger(t, &u.column(k), &vt.row(k).transpose(), 1.0);
    }
    (out, nuclear)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().sum()
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0, |a: f64, &b| a.max(b))
}

/// Solves `min ‖L‖_* + λ‖S‖_1` subject to `L + S = G`.
///
/// Non-convergence within `max_iter` is reported through `converged`, not as
/// an error.
pub fn rpca_decompose(g: &DMatrix<f64>, opts: &RpcaOptions) -> Result<DecompositionResult> {
    check_finite(g)?;
    let (m, n) = g.shape();
    if m == 0 || n == 0 {
        return Err(invalid("empty matrix"));
    }
    let lambda = match opts.lambda {
        Some(l) if l > 0.0 && l.is_finite() => l,
        Some(l) => return Err(invalid(format!("lambda {l} must be positive"))),
        None => 1.0 / (m.max(n) as f64).sqrt(),
    };
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }

    let g_fro = g.norm();
    if g_fro == 0.0 {
        return Ok(DecompositionResult {
            low_rank: DMatrix::zeros(m, n),
            sparse: DMatrix::zeros(m, n),
            iterations: 0,
            primal_residual: 0.0,
            converged: true,
            objective_history: vec![0.0],
            lambda,
        });
    }

    let norm_two = spectral_norm(g);
    let norm_inf = g.amax() / lambda;
    let mut y = g / norm_two.max(norm_inf);
    let mut mu = 1.25 / norm_two;
    let mu_max = mu * 1e7;
    let rho = 1.5;

    let mut l = DMatrix::zeros(m, n);
    let mut s = DMatrix::zeros(m, n);
    let mut history = Vec::new();
    let mut residual = 1.0;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let inv_mu = 1.0 / mu;

        let mut t = g - &l + &y * inv_mu;
        t.apply(|v| *v = soft_threshold(*v, lambda * inv_mu));
        s = t;

        let (new_l, nuclear) = svt_unchecked(&(g - &s + &y * inv_mu), inv_mu);
        l = new_l;

        let z = g - &l - &s;
        residual = z.norm() / g_fro;
        y += &z * mu;
        mu = (mu * rho).min(mu_max);

        let feasible_l1: f64 = (g - &l).iter().map(|v| v.abs()).sum();
        history.push(nuclear + lambda * feasible_l1);
        debug!("rpca iter {iterations}: residual {residual:.3e}");
        if residual <= opts.tol {
            break;
        }
    }
    let converged = residual <= opts.tol;
    if !converged {
        warn!("rpca stopped after {iterations} iterations with residual {residual:.3e}");
    }
    Ok(DecompositionResult {
        low_rank: l,
        sparse: s,
        iterations,
        primal_residual: residual,
        converged,
        objective_history: history,
        lambda,
    })
}

/// Stacks frames as the columns of a `pixels × frames` matrix.
pub fn frames_to_matrix(frames: &[Image]) -> Result<DMatrix<f64>> {
    let first = frames.first().ok_or_else(|| invalid("no frames"))?;
    for f in frames {
        crate::error::ensure_same_shape(first.shape(), f.shape())?;
    }
    Ok(DMatrix::from_fn(first.len(), frames.len(), |p, k| frames[k].data()[p]))
}

pub fn column_to_image(m: &DMatrix<f64>, col: usize, width: usize, height: usize) -> Result<Image> {
    if m.nrows() != width * height || col >= m.ncols() {
        return Err(invalid("column does not match frame shape"));
    }
    Image::new(width, height, m.column(col).iter().copied().collect())
}

/// Per-pixel median across the columns of `L`.
pub fn reference_from_lowrank(l: &DMatrix<f64>, width: usize, height: usize) -> Result<Image> {
    if l.nrows() != width * height || l.ncols() == 0 {
        return Err(invalid(format!(
            "low-rank matrix {}x{} does not reshape to {width}x{height}",
            l.nrows(),
            l.ncols()
        )));
    }
    let mut buf = Vec::with_capacity(l.ncols());
    let data = (0..l.nrows())
        .map(|p| {
            buf.clear();
            buf.extend(l.row(p).iter().copied());
            median(&mut buf)
        })
        .collect();
    Image::new(width, height, data)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
