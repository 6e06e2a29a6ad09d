//! Discrete gradients, their adjoints, the Laplacian and the scalar shrinkage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbmend::grid::{cut, grad_x, grad_x_adj, grad_y, grad_y_adj, laplacian, shrink};
use turbmend::Image;

fn main() -> turbmend::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = Image::from_fn(12, 9, |_, _| rng.random_range(0.0..1.0));
    let p = Image::from_fn(12, 9, |_, _| rng.random_range(-1.0..1.0));

    let gx = grad_x(&u).dot(&p) - u.dot(&grad_x_adj(&p));
    let gy = grad_y(&u).dot(&p) - u.dot(&grad_y_adj(&p));
    println!("adjoint mismatch: grad_x {gx:.2e}, grad_y {gy:.2e}");

    let composed = grad_x_adj(&grad_x(&u)).zip_map(&grad_y_adj(&grad_y(&u)), |a, b| -a - b)?;
    println!("laplacian vs -(DxᵀDx + DyᵀDy): {:.2e}", laplacian(&u).max_abs_diff(&composed));
    println!("laplacian sup norm {:.3} <= 8 * {:.3}", laplacian(&u).norm_inf(), u.norm_inf());

    for x in [-0.8, -0.1, 0.05, 0.6] {
        let (s, c) = (shrink(x, 0.2)?, cut(x, 0.2)?);
        println!("x {x:+.2}: shrink {s:+.2}, cut {c:+.2}, sum {:+.2}", s + c);
    }
    Ok(())
}
