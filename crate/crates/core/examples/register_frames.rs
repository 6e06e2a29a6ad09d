//! B-spline registration of turbulent frames onto the sharp scene.

use turbmend::metrics::psnr;
use turbmend::registration::{field_from_grid, register_detailed, warp, FieldDirection, RegistrationConfig};
use turbmend::scene::skyline;
use turbmend::simulator::{degrade, Preset, TurbulenceConfig};

fn main() -> turbmend::Result<()> {
    let truth = skyline(96, 96, 2);
    let cfg = TurbulenceConfig { sigma_n2: 0.0, disc_radius: 0.0, ..TurbulenceConfig::from_preset(Preset::Weak) }.with_frames(3);
    let (frames, true_fields) = degrade(&truth, &cfg)?;
    let reg = RegistrationConfig::default();
    for (k, (f, t)) in frames.iter().zip(&true_fields).enumerate() {
        let r = register_detailed(f, &truth, &reg)?;
        let field = field_from_grid(&r.grid, FieldDirection::PushForward);
        let moved = warp(f, &field)?;
        println!(
            "frame {k}: ssd {:.2e} -> {:.2e}, PSNR {:.2} -> {:.2} dB, true max shift {:.2}, estimated {:.2}",
            r.initial_ssd,
            r.final_ssd,
            psnr(f, &truth, 1.0)?,
            psnr(&moved, &truth, 1.0)?,
            t.max_norm(),
            field.max_norm()
        );
    }
    Ok(())
}
