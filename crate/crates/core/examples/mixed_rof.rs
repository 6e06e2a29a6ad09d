//! The PDE-free mixed-ROF iteration against the split Bregman oracle.

use std::time::Instant;

use turbmend::nltv::{build_graph, GraphParams};
use turbmend::pipeline::bench_problem;
use turbmend::variational::{
    mixed_rof_objective, solve_fast, solve_split_bregman, CgOptions, MixedRofProblem, RofParams, SolveOptions,
};

fn main() -> turbmend::Result<()> {
    let (v, u_p) = bench_problem(32, 1)?;
    let g = build_graph(&v, &GraphParams::default())?;
    let params = RofParams::default();
    println!("step bound 20*lambda1 + 4*lambda2 = {:.2}", params.step_bound());
    let p = MixedRofProblem::new(v, u_p, &g, params)?;
    let opts = SolveOptions { max_iter: 300, tol: 0.0 };

    let t = Instant::now();
    let fast = solve_fast(&p, &opts)?;
    let fast_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let sb = solve_split_bregman(&p, &opts, &CgOptions::default())?;
    let sb_s = t.elapsed().as_secs_f64();

    println!("fast:          objective {:.6}, {fast_s:.3} s", mixed_rof_objective(&fast.u, &p)?);
    println!(
        "split Bregman: objective {:.6}, {sb_s:.3} s, {} CG steps",
        mixed_rof_objective(&sb.u, &p)?,
        sb.cg_iterations.iter().sum::<usize>()
    );
    let first = fast.gamma.first().copied().unwrap_or(0.0);
    let last = fast.gamma.last().copied().unwrap_or(0.0);
    println!("gamma_k {first:.3e} -> {last:.3e}, |u_fast - u_sb| {:.2e}", fast.u.max_abs_diff(&sb.u));
    Ok(())
}
