//! Full restoration of a small simulated sequence, with stage outputs.
//!
//! `cargo run --example restore_sequence -- [out_dir]`

use turbmend::metrics::{psnr, ssim, temporal_mean};
use turbmend::pipeline::{restore_frames, PipelineConfig};
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(64, 64, 1);
    let (frames, _) = degrade(&truth, &TurbulenceConfig::from_preset(Preset::Weak).with_frames(10))?;
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let r = restore_frames(&frames, &PipelineConfig::default(), out.as_deref())?;
    let mean = temporal_mean(&frames)?;
    for (name, im) in [
        ("temporal mean", &mean),
        ("reference", &r.reference),
        ("enhanced", &r.enhanced_reference),
        ("fused", &r.fused),
        ("restored", &r.restored),
    ] {
        println!("{name:>13}: PSNR {:.2} dB, SSIM {:.4}", psnr(im, &truth, 1.0)?, ssim(im, &truth)?);
    }
    for rec in &r.log {
        println!("{:>8} {:.2} s", rec.stage, rec.seconds);
    }
    Ok(())
}
