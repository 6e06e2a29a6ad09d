//! Near-stationary patch fusion of a registered sequence.

use turbmend::fusion::{fuse, FusionConfig};
use turbmend::metrics::{psnr, ssim, temporal_mean};
use turbmend::registration::{register_all, warp, FieldDirection, RegistrationConfig};
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(64, 64, 4);
    let cfg = TurbulenceConfig::from_preset(Preset::Weak).with_frames(12);
    let (frames, _) = degrade(&truth, &cfg)?;
    let mean = temporal_mean(&frames)?;
    let fields = register_all(&frames, &mean, &RegistrationConfig::default(), FieldDirection::PushForward)?;
    let registered: Vec<_> = frames.iter().zip(&fields).map(|(f, p)| warp(f, p)).collect::<turbmend::Result<_>>()?;
    for spatial in [false, true] {
        let r = fuse(&registered, &fields, &FusionConfig { spatial_correction: spatial, ..FusionConfig::default() })?;
        let mut counts = vec![0usize; frames.len()];
        r.k_star.iter().for_each(|&k| counts[k as usize] += 1);
        println!(
            "spatial correction {spatial}: PSNR {:.2}, SSIM {:.4}, corrected {:.2}, k* histogram {counts:?}",
            psnr(&r.z, &truth, 1.0)?,
            ssim(&r.z, &truth)?,
            r.corrected_fraction
        );
    }
    println!("temporal mean: PSNR {:.2}, SSIM {:.4}", psnr(&mean, &truth, 1.0)?, ssim(&mean, &truth)?);
    Ok(())
}
