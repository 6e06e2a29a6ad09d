//! Reference enhancement by Bregman iteration with forward-backward
//! splitting, and two solvers for the mixed-ROF proximal subproblem
//!
//! ```text
//! min_u  μ1 |∇_w u|_1 + μ2 (|∇x(u − u_p)|_1 + |∇y(u − u_p)|_1) + ½‖u − v‖²
//! ```
//!
//! [`solve_fast`] is the PDE-free iteration: clamp updates of the dual
//! variables followed by an explicit update of `u`. [`solve_split_bregman`]
//! is the classical split Bregman method with a conjugate-gradient linear
//! solve and serves as the reference.

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure_same_shape, invalid, Error, Result};
use crate::grid::{
    clamp_sym, grad_adj_sum_into, grad_x, grad_x_into, grad_y, grad_y_into, laplacian_into,
    soft_threshold, Image,
};
use crate::nltv::{build_graph, GraphParams, NltvGraph};
use crate::registration::{
    field_from_grid, invert_field, register, register_all, warp, warp_adj, DeformationField,
    FieldDirection, RegistrationConfig,
};

/// Regularization and penalty weights of the mixed-ROF model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RofParams {
    pub mu1: f64,
    pub mu2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RofParams {
    fn default() -> Self {
        Self {
            mu1: 0.5,
            mu2: 0.25,
            lambda1: 0.02,
            lambda2: 0.02,
        }
    }
}

impl RofParams {
    /// `20·λ1 + 4·λ2`; the fast iteration requires this in `(0, 1)`.
    pub fn step_bound(&self) -> f64 {
        20.0 * self.lambda1 + 4.0 * self.lambda2
    }

    pub fn is_admissible(&self) -> bool {
        let b = self.step_bound();
        b > 0.0 && b < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu1, self.mu2, self.lambda1, self.lambda2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.mu1 < 0.0 || self.mu2 < 0.0 {
            return Err(invalid("mu1 and mu2 must be finite and nonnegative"));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return Err(invalid("lambda1 and lambda2 must be positive"));
        }
        Ok(())
    }
}

/// One instance of the mixed-ROF subproblem.
#[derive(Debug, Clone)]
pub struct MixedRofProblem<'g> {
    pub v: Image,
    pub u_p: Image,
    pub graph: &'g NltvGraph,
    pub params: RofParams,
}

impl<'g> MixedRofProblem<'g> {
    pub fn new(v: Image, u_p: Image, graph: &'g NltvGraph, params: RofParams) -> Result<Self> {
        ensure_same_shape(v.shape(), u_p.shape())?;
        ensure_same_shape(graph.shape(), v.shape())?;
        params.validate()?;
        Ok(Self { v, u_p, graph, params })
    }

    pub fn is_admissible(&self) -> bool {
        self.params.is_admissible()
    }
}

/// Exact value of the mixed-ROF objective at `u`. The nonlocal term sums
/// `|∇_w u|` over all directed edges.
pub fn mixed_rof_objective(u: &Image, p: &MixedRofProblem) -> Result<f64> {
    ensure_same_shape(p.v.shape(), u.shape())?;
    let g = p.graph;
    let mut gw = vec![0.0; g.num_edges()];
    g.grad_into(u.data(), &mut gw);
    let nl: f64 = gw.iter().map(|v| v.abs()).sum();
    let diff = u.zip_map(&p.u_p, |a, b| a - b)?;
    let tv: f64 = grad_x(&diff).data().iter().chain(grad_y(&diff).data()).map(|v| v.abs()).sum();
    let fid: f64 = u.data().iter().zip(p.v.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(p.params.mu1 * nl + p.params.mu2 * tv + 0.5 * fid)
}

/// Stopping rule shared by both solvers: stop once `‖u^{k+1} − u^k‖∞ < tol`
/// or after `max_iter` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Conjugate-gradient settings for the split Bregman linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual target.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

/// Solver output with per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u: Image,
    pub iterations: usize,
    pub converged: bool,
    /// `‖u^{k+1} − u^k‖∞` per iteration.
    pub changes: Vec<f64>,
    /// Fast solver only: `γ_k = ½ Σ λ_i ‖b_i^k − b_i^{k−1}‖²`, which is
    /// non-increasing under the step condition.
    pub gamma: Vec<f64>,
    /// Split Bregman only: CG iterations per outer step.
    pub cg_iterations: Vec<usize>,
}

struct Buffers {
    gw: Vec<f64>,
    gx: Image,
    gy: Image,
    div: Vec<f64>,
    adj: Image,
}

impl Buffers {
    fn new(g: &NltvGraph, like: &Image) -> Self {
        Self {
            gw: vec![0.0; g.num_edges()],
            gx: like.zeros_like(),
            gy: like.zeros_like(),
            div: vec![0.0; like.len()],
            adj: like.zeros_like(),
        }
    }
}

/// PDE-free iteration for the mixed-ROF model.
///
/// Starting from `b = 0`, `u^1 = v`:
/// `b_w ← cut(∇_w u + b_w, μ1/λ1)`, `b_{x,y} ← cut(∇_{x,y}(u − u_p) + b_{x,y}, μ2/λ2)`,
/// `u ← v + λ1 div_w b_w − λ2 (∇xᵀ b_x + ∇yᵀ b_y)`.
/// A zero `μ` makes its clamp threshold zero, so that term drops out.
pub fn solve_fast(p: &MixedRofProblem, opts: &SolveOptions) -> Result<SolveReport> {
    if !p.is_admissible() {
        return Err(Error::Config(format!(
            "fast solver needs 0 < 20·λ1 + 4·λ2 < 1, got {}",
            p.params.step_bound()
        )));
    }
    let g = p.graph;
    let RofParams { mu1, mu2, lambda1, lambda2 } = p.params;
    let (t1, t2) = (mu1 / lambda1, mu2 / lambda2);
    let gpx = grad_x(&p.u_p);
    let gpy = grad_y(&p.u_p);

    let mut u = p.v.clone();
    let mut next = p.v.zeros_like();
    let mut bw = vec![0.0; g.num_edges()];
    let mut bx = p.v.zeros_like();
    let mut by = p.v.zeros_like();
    let mut buf = Buffers::new(g, &p.v);
    let mut report = SolveReport {
        u: p.v.clone(),
        iterations: 0,
        converged: false,
        changes: Vec::new(),
        gamma: Vec::new(),
        cg_iterations: Vec::new(),
    };

    for _ in 0..opts.max_iter {
        let mut gamma_w = 0.0;
        if mu1 > 0.0 {
            g.grad_into(u.data(), &mut buf.gw);
            for (b, &d) in bw.iter_mut().zip(&buf.gw) {
                let nb = clamp_sym(d + *b, t1);
                gamma_w += (nb - *b) * (nb - *b);
                *b = nb;
            }
        }
        let mut gamma_t = 0.0;
        if mu2 > 0.0 {
            grad_x_into(&u, &mut buf.gx);
            grad_y_into(&u, &mut buf.gy);
            for (b, (&d, &dp)) in bx.data_mut().iter_mut().zip(buf.gx.data().iter().zip(gpx.data())) {
                let nb = clamp_sym(d - dp + *b, t2);
                gamma_t += (nb - *b) * (nb - *b);
                *b = nb;
            }
            for (b, (&d, &dp)) in by.data_mut().iter_mut().zip(buf.gy.data().iter().zip(gpy.data())) {
                let nb = clamp_sym(d - dp + *b, t2);
                gamma_t += (nb - *b) * (nb - *b);
                *b = nb;
            }
        }
        report.gamma.push(0.5 * (lambda1 * gamma_w + lambda2 * gamma_t));

        if mu1 > 0.0 {
            g.div_into(&bw, &mut buf.div);
        }
        if mu2 > 0.0 {
            grad_adj_sum_into(&bx, &by, &mut buf.adj);
        }
        let mut change: f64 = 0.0;
        {
            let nd = next.data_mut();
            let v = p.v.data();
            let ud = u.data();
            for k in 0..nd.len() {
                let mut val = v[k];
                if mu1 > 0.0 {
                    val += lambda1 * buf.div[k];
                }
                if mu2 > 0.0 {
                    val -= lambda2 * buf.adj.data()[k];
                }
                nd[k] = val;
                change = change.max((val - ud[k]).abs());
            }
        }
        std::mem::swap(&mut u, &mut next);
        report.iterations += 1;
        report.changes.push(change);
        if change < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.u = u;
    Ok(report)
}

/// Applies `A x = x − 2λ1 Δ_w x − λ2 Δ x`, the split Bregman system matrix.
fn apply_system(g: &NltvGraph, l1: f64, l2: f64, x: &Image, out: &mut Image, lap_w: &mut [f64], lap: &mut Image) {
    g.laplacian_into(x.data(), lap_w);
    laplacian_into(x, lap);
    let (xd, ld) = (x.data(), lap.data());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        *o = xd[k] - 2.0 * l1 * lap_w[k] - l2 * ld[k];
    }
}

/// Solves `(I − 2λ1Δ_w − λ2Δ) x = rhs` by conjugate gradients from `x`.
fn conjugate_gradient(g: &NltvGraph, l1: f64, l2: f64, rhs: &Image, x: &mut Image, opts: &CgOptions) -> Result<usize> {
    let n = rhs.len();
    let mut lap_w = vec![0.0; n];
    let mut lap = rhs.zeros_like();
    let mut ax = rhs.zeros_like();
    apply_system(g, l1, l2, x, &mut ax, &mut lap_w, &mut lap);
    let mut r = rhs.zip_map(&ax, |a, b| a - b)?;
    let rhs_norm = rhs.norm_l2().max(f64::MIN_POSITIVE);
    let mut rr = r.dot(&r);
    if rr.sqrt() <= opts.tol * rhs_norm {
        return Ok(0);
    }
    let mut d = r.clone();
    let mut ad = rhs.zeros_like();
    for it in 1..=opts.max_iter {
        apply_system(g, l1, l2, &d, &mut ad, &mut lap_w, &mut lap);
        let alpha = rr / d.dot(&ad);
        x.axpy(alpha, &d);
        r.axpy(-alpha, &ad);
        let rr_new = r.dot(&r);
        if rr_new.sqrt() <= opts.tol * rhs_norm {
            return Ok(it);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (dv, rv) in d.data_mut().iter_mut().zip(r.data()) {
            *dv = rv + beta * *dv;
        }
    }
    Err(Error::CgNotConverged {
        iterations: opts.max_iter,
        residual: rr.sqrt() / rhs_norm,
    })
}

/// Split Bregman for the mixed-ROF model with a CG solve of
/// `(I − 2λ1Δ_w − λ2Δ) u = v + λ1 div_w(b_w − d_w) + λ2 ∇xᵀ(d_x + ∇x u_p − b_x) + λ2 ∇yᵀ(d_y + ∇y u_p − b_y)`.
pub fn solve_split_bregman(p: &MixedRofProblem, opts: &SolveOptions, cg: &CgOptions) -> Result<SolveReport> {
    let g = p.graph;
    let RofParams { mu1, mu2, lambda1, lambda2 } = p.params;
    let (t1, t2) = (mu1 / lambda1, mu2 / lambda2);
    let gpx = grad_x(&p.u_p);
    let gpy = grad_y(&p.u_p);

    let mut u = p.v.clone();
    let mut dw = vec![0.0; g.num_edges()];
    let mut bw = vec![0.0; g.num_edges()];
    let mut dx = p.v.zeros_like();
    let mut dy = p.v.zeros_like();
    let mut bx = p.v.zeros_like();
    let mut by = p.v.zeros_like();
    let mut buf = Buffers::new(g, &p.v);
    let mut tx = p.v.zeros_like();
    let mut ty = p.v.zeros_like();
    let mut rhs = p.v.zeros_like();
    let mut report = SolveReport {
        u: p.v.clone(),
        iterations: 0,
        converged: false,
        changes: Vec::new(),
        gamma: Vec::new(),
        cg_iterations: Vec::new(),
    };

    for _ in 0..opts.max_iter {
        let diff_w: Vec<f64> = bw.iter().zip(&dw).map(|(b, d)| b - d).collect();
        g.div_into(&diff_w, &mut buf.div);
        for k in 0..tx.len() {
            tx.data_mut()[k] = dx.data()[k] + gpx.data()[k] - bx.data()[k];
            ty.data_mut()[k] = dy.data()[k] + gpy.data()[k] - by.data()[k];
        }
        grad_adj_sum_into(&tx, &ty, &mut buf.adj);
        for k in 0..rhs.len() {
            rhs.data_mut()[k] = p.v.data()[k] + lambda1 * buf.div[k] + lambda2 * buf.adj.data()[k];
        }
        let prev = u.clone();
        let cg_iters = conjugate_gradient(g, lambda1, lambda2, &rhs, &mut u, cg)?;
        report.cg_iterations.push(cg_iters);

        g.grad_into(u.data(), &mut buf.gw);
        for ((d, b), &gv) in dw.iter_mut().zip(bw.iter_mut()).zip(&buf.gw) {
            *d = soft_threshold(gv + *b, t1);
            *b += gv - *d;
        }
        grad_x_into(&u, &mut buf.gx);
        grad_y_into(&u, &mut buf.gy);
        for k in 0..u.len() {
            let sx = buf.gx.data()[k] - gpx.data()[k];
            let nx = soft_threshold(sx + bx.data()[k], t2);
            dx.data_mut()[k] = nx;
            bx.data_mut()[k] += sx - nx;
            let sy = buf.gy.data()[k] - gpy.data()[k];
            let ny = soft_threshold(sy + by.data()[k], t2);
            dy.data_mut()[k] = ny;
            by.data_mut()[k] += sy - ny;
        }

        let change = u.max_abs_diff(&prev);
        report.iterations += 1;
        report.changes.push(change);
        if change < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.u = u;
    Ok(report)
}

/// Dense matrix of `I + 2λ1Δ_w + λ2Δ` on the graph's pixel grid.
pub fn lemma_operator(g: &NltvGraph, lambda1: f64, lambda2: f64) -> DMatrix<f64> {
    let (w, h) = g.shape();
    let n = w * h;
    let mut m = DMatrix::zeros(n, n);
    let mut e = Image::zeros(w, h);
    let mut lap_w = vec![0.0; n];
    let mut lap = Image::zeros(w, h);
    for c in 0..n {
        e.data_mut()[c] = 1.0;
        g.laplacian_into(e.data(), &mut lap_w);
        laplacian_into(&e, &mut lap);
        for r in 0..n {
            m[(r, c)] = e.data()[r] + 2.0 * lambda1 * lap_w[r] + lambda2 * lap.data()[r];
        }
        e.data_mut()[c] = 0.0;
    }
    m
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// One gradient step on the data term, averaged over frames:
/// `v = u − (δ/N) Σ Φ_iᵀ(Φ_i u − f̃_i)`.
pub fn forward_step(u: &Image, fields: &[DeformationField], fed: &[Image], delta: f64) -> Result<Image> {
    if !(delta > 0.0) {
        return Err(invalid("step delta must be positive"));
    }
    if fields.len() != fed.len() || fields.is_empty() {
        return Err(invalid("need one field per frame"));
    }
    let scale = delta / fields.len() as f64;
    let mut v = u.clone();
    for (f, fi) in fields.iter().zip(fed) {
        let r = warp(u, f)?.zip_map(fi, |a, b| a - b)?;
        v.axpy(-scale, &warp_adj(&r, f)?);
    }
    Ok(v)
}

/// `Σ_i ‖Φ_i u − f_i‖₂`.
pub fn data_residual(u: &Image, fields: &[DeformationField], frames: &[Image]) -> Result<f64> {
    let mut total = 0.0;
    for (f, fi) in fields.iter().zip(frames) {
        total += warp(u, f)?.zip_map(fi, |a, b| a - b)?.norm_l2();
    }
    Ok(total)
}

/// Iterate of the Bregman outer loop: the current estimate and the
/// residual-fed data `f̃_i`.
#[derive(Debug, Clone)]
pub struct BregmanState {
    pub u: Image,
    pub fed: Vec<Image>,
    pub k: usize,
}

impl BregmanState {
    pub fn new(u: Image, frames: &[Image]) -> Self {
        Self {
            u,
            fed: frames.to_vec(),
            k: 0,
        }
    }
}

/// Settings of the variational stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalConfig {
    pub rof: RofParams,
    pub delta: f64,
    pub middle_loop: usize,
    pub inner_loop: usize,
    /// Fast-solver iterations per backward step.
    pub rof_iterations: usize,
    /// Early exit of the inner loop on relative data-residual change.
    pub inner_tol: f64,
    pub graph: GraphParams,
    pub registration: RegistrationConfig,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            rof: RofParams::default(),
            delta: 1.0,
            middle_loop: 3,
            inner_loop: 10,
            rof_iterations: 10,
            inner_tol: 1e-4,
            graph: GraphParams::default(),
            registration: RegistrationConfig::default(),
        }
    }
}

/// Solves one Bregman subproblem by `inner_loop` forward-backward steps and
/// then feeds the residual back: `f̃_i ← f̃_i + f_i − Φ_i u`.
pub fn bregman_outer(
    state: BregmanState,
    frames: &[Image],
    fields: &[DeformationField],
    graph: &NltvGraph,
    u_p: &Image,
    cfg: &VariationalConfig,
) -> Result<BregmanState> {
    if frames.len() != state.fed.len() {
        return Err(invalid("frame count changed between Bregman steps"));
    }
    let opts = SolveOptions {
        max_iter: cfg.rof_iterations,
        tol: 0.0,
    };
    let mut u = state.u;
    let mut last = data_residual(&u, fields, &state.fed)?;
    for inner in 0..cfg.inner_loop {
        let v = forward_step(&u, fields, &state.fed, cfg.delta)?;
        let problem = MixedRofProblem::new(v, u_p.clone(), graph, cfg.rof)?;
        u = solve_fast(&problem, &opts)?.u;
        let res = data_residual(&u, fields, &state.fed)?;
        debug!(target: "turbmend::diagnostics", "{},{},{:.6e}", state.k, inner, res);
        if (last - res).abs() <= cfg.inner_tol * last.max(f64::MIN_POSITIVE) {
            break;
        }
        last = res;
    }
    let mut fed = state.fed;
    for ((fi, f), field) in fed.iter_mut().zip(frames).zip(fields) {
        let pred = warp(&u, field)?;
        for k in 0..fi.len() {
            fi.data_mut()[k] += f.data()[k] - pred.data()[k];
        }
    }
    Ok(BregmanState { u, fed, k: state.k + 1 })
}

/// Output of [`enhance_reference`].
#[derive(Debug, Clone)]
pub struct Enhancement {
    pub reference: Image,
    /// `R_i = warp(f_i, push_i)`, each frame moved onto the reference.
    pub registered: Vec<Image>,
    /// Fields that warp each frame toward the reference.
    pub push_forward: Vec<DeformationField>,
    /// Fields that warp the reference toward each frame.
    pub pull_back: Vec<DeformationField>,
    /// Data residual `Σ‖Φ_i u − f_i‖` after each middle iteration.
    pub residuals: Vec<f64>,
}

/// Middle loop: rebuild the graph from the current reference, register the
/// reference onto every frame, and run one Bregman step. Finally register
/// every frame onto the enhanced reference.
pub fn enhance_reference(frames: &[Image], initial: &Image, cfg: &VariationalConfig) -> Result<Enhancement> {
    let first = frames.first().ok_or_else(|| invalid("no frames"))?;
    for f in frames {
        ensure_same_shape(first.shape(), f.shape())?;
    }
    ensure_same_shape(first.shape(), initial.shape())?;

    let mut state = BregmanState::new(initial.clone(), frames);
    let mut u_p = initial.clone();
    let mut residuals = Vec::new();
    for m in 0..cfg.middle_loop {
        let graph = build_graph(&state.u, &cfg.graph)?;
        let fields = pull_back_fields(&state.u, frames, &cfg.registration)?;
        state = bregman_outer(state, frames, &fields, &graph, &u_p, cfg)?;
        let res = data_residual(&state.u, &fields, frames)?;
        debug!("middle loop {m}: data residual {res:.6e}");
        residuals.push(res);
        u_p = state.u.clone();
    }
    let reference = state.u;
    let push_forward = register_all(frames, &reference, &cfg.registration, FieldDirection::PushForward)?;
    let mut registered = Vec::with_capacity(frames.len());
    let mut pull_back = Vec::with_capacity(frames.len());
    for (f, field) in frames.iter().zip(&push_forward) {
        registered.push(warp(f, field)?);
        let inv = invert_field(field, 20);
        if inv.residual > 0.5 {
            warn!("field inversion residual {:.3} px", inv.residual);
        }
        pull_back.push(inv.field);
    }
    Ok(Enhancement {
        reference,
        registered,
        push_forward,
        pull_back,
        residuals,
    })
}

fn pull_back_fields(u: &Image, frames: &[Image], cfg: &RegistrationConfig) -> Result<Vec<DeformationField>> {
    use rayon::prelude::*;
    frames
        .par_iter()
        .map(|f| register(u, f, cfg).map(|g| field_from_grid(&g, FieldDirection::PullBack)))
        .collect()
}
