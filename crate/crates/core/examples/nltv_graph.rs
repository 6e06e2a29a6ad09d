//! Builds the nonlocal weight graph of an image and checks its operators.

use turbmend::nltv::{build_graph, nl_div, nl_grad, nl_laplacian, nltv_norm, GraphParams, NltvGraph};
use turbmend::scene::skyline;

fn main() -> turbmend::Result<()> {
    let u = skyline(48, 48, 1);
    let params = GraphParams::default();
    let g = build_graph(&u, &params)?;
    println!(
        "{} pixels, {} directed edges, max weight {:.3}, max weighted degree {:.2} (cap {})",
        g.num_pixels(),
        g.num_edges(),
        g.max_weight(),
        g.max_weighted_degree(),
        params.k
    );
    println!("NLTV norm {:.4}", nltv_norm(&u, &g)?);

    let p = nl_grad(&u, &g)?;
    let lhs = nl_div(&p, &g)?.dot(&u);
    println!("<div_w grad_w u, u> = {lhs:.6} = -|grad_w u|^2 = {:.6}", -p.dot(&p));
    let lap = nl_laplacian(&u, &g)?;
    println!("nonlocal laplacian sup norm {:.4}", lap.norm_inf());

    let mut edges = Vec::new();
    g.write_edge_list(&mut edges)?;
    let back = NltvGraph::read_edge_list(edges.as_slice())?;
    println!("edge list: {} bytes, round trip edges {}", edges.len(), back.num_edges());
    Ok(())
}
