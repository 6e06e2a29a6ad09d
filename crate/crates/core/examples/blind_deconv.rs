//! Blind deconvolution of a disc-blurred image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use turbmend::deconv::{blind_deconvolve, convolve_invariant, DeconvParams};
use turbmend::metrics::psnr;
use turbmend::scene::skyline;
use turbmend::simulator::disc_psf;
use turbmend::Image;

fn main() -> turbmend::Result<()> {
    let sharp = skyline(96, 96, 1);
    let blurred = convolve_invariant(&sharp, &disc_psf(2.0)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.003).expect("valid deviation");
    let z = Image::new(96, 96, blurred.data().iter().map(|v| v + noise.sample(&mut rng)).collect())?;
    let r = blind_deconvolve(&z, &DeconvParams::simulated())?;
    println!("energy per alternation: {:?}", r.energy.iter().map(|e| (e * 10.0).round() / 10.0).collect::<Vec<_>>());
    println!("estimated kernel ({} alternations rejected):", r.rejected_kernel_steps);
    for a in 0..r.psf.height() {
        let row: Vec<String> = (0..r.psf.width()).map(|b| format!("{:.3}", r.psf.get(a, b))).collect();
        println!("  {}", row.join(" "));
    }
    println!("PSNR blurred {:.2} dB, restored {:.2} dB", psnr(&z, &sharp, 1.0)?, psnr(&r.latent, &sharp, 1.0)?);
    Ok(())
}
