//! Low-rank reference image from a turbulent sequence.

use turbmend::metrics::{mean_local_variance, psnr, temporal_mean};
use turbmend::rpca::{frames_to_matrix, reference_from_lowrank, rpca_decompose, RpcaOptions};
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(64, 64, 1);
    let cfg = TurbulenceConfig::from_preset(Preset::Strong).with_frames(16);
    let (frames, _) = degrade(&truth, &cfg)?;
    let dec = rpca_decompose(&frames_to_matrix(&frames)?, &RpcaOptions::default())?;
    let reference = reference_from_lowrank(&dec.low_rank, 64, 64)?;
    let mean = temporal_mean(&frames)?;
    println!(
        "iALM: {} iterations, converged {}, residual {:.2e}, lambda {:.4}",
        dec.iterations, dec.converged, dec.primal_residual, dec.lambda
    );
    for (name, im) in [("temporal mean", &mean), ("low-rank reference", &reference)] {
        println!(
            "{name:>18}: PSNR {:.2} dB, sharpness {:.5}",
            psnr(im, &truth, 1.0)?,
            mean_local_variance(im, 13)?
        );
    }
    Ok(())
}
