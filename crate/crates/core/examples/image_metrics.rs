//! PSNR, SSIM and sharpness of degraded and averaged frames.

use turbmend::metrics::{mean_local_variance, psnr, ssim, temporal_mean};
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(64, 64, 2);
    let (frames, _) = degrade(&truth, &TurbulenceConfig::from_preset(Preset::Weak).with_frames(10))?;
    let mean = temporal_mean(&frames)?;
    println!("name,psnr,ssim,sharpness");
    for (name, im) in [("truth", &truth), ("frame_0", &frames[0]), ("mean", &mean)] {
        let p = psnr(im, &truth, 1.0)?;
        let p = if p.is_infinite() { "inf".to_string() } else { format!("{p:.3}") };
        println!("{name},{p},{:.4},{:.5}", ssim(im, &truth)?, mean_local_variance(im, 13)?);
    }
    Ok(())
}
