//! Synthetic turbulent sequences for each preset, optionally written to disk.
//!
//! `cargo run --example simulate_turbulence -- [out_dir]`

use std::path::PathBuf;

use turbmend::metrics::{psnr, temporal_mean};
use turbmend::pipeline::simulate;
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(64, 64, 1);
    for preset in [Preset::Identity, Preset::Weak, Preset::Strong] {
        let cfg = TurbulenceConfig::from_preset(preset).with_frames(8);
        let (frames, fields) = degrade(&truth, &cfg)?;
        let shift = fields.iter().map(|f| f.max_norm()).fold(0.0, f64::max);
        println!(
            "{:>8}: frame PSNR {:.2} dB, mean PSNR {:.2} dB, max shift {shift:.2} px",
            preset.name(),
            psnr(&frames[0], &truth, 1.0)?,
            psnr(&temporal_mean(&frames)?, &truth, 1.0)?
        );
    }
    if let Some(out) = std::env::args().nth(1).map(PathBuf::from) {
        let cfg = TurbulenceConfig::from_preset(Preset::Weak).with_frames(8);
        simulate(&truth, &cfg, &out, true)?;
        println!("wrote frames, manifest.txt and fields to {}", out.display());
    }
    Ok(())
}
