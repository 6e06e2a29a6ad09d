//! Deterministic synthetic ground-truth scenes for simulation and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Image;

/// A city-like skyline: sky gradient, buildings with window grids, a dome,
/// a diagonal cable and a band of fine bars. Values lie in `[0.05, 0.95]`.
pub fn skyline(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let mut img = Image::from_fn(width, height, |i, _| 0.75 - 0.25 * i as f64 / h);

    let mut x = 0.0;
    while x < w {
        let bw = rng.random_range(0.08..0.2) * w;
        let top = rng.random_range(0.25..0.7) * h;
        let tone: f64 = rng.random_range(0.15..0.55);
        let win_tone = (tone + rng.random_range(0.2..0.35)).min(0.9);
        let pitch_i = rng.random_range(5..10);
        let pitch_j = rng.random_range(5..10);
        for i in (top as usize)..height {
            for j in (x as usize)..((x + bw) as usize).min(width) {
                let (li, lj) = (i - top as usize, j - x as usize);
                let window = li % pitch_i >= 2 && lj % pitch_j >= 2 && li % pitch_i < pitch_i - 1 && lj % pitch_j < pitch_j - 1;
                img.set(i, j, if window { win_tone } else { tone });
            }
        }
        x += bw + rng.random_range(0.0..0.03) * w;
    }

    let (ci, cj, r) = (0.3 * h, 0.7 * w, 0.12 * w.min(h));
    for i in 0..height {
        for j in 0..width {
            let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
            if d < r {
                img.set(i, j, 0.35 + 0.4 * (1.0 - d / r));
            }
            // Cable from the upper left towards the dome.
            let t = (j as f64) / w;
            if ((i as f64) - (0.1 * h + 0.25 * h * t)).abs() < 1.0 && t < 0.6 {
                img.set(i, j, 0.1);
            }
        }
    }

    let band = (0.88 * h) as usize;
    for i in band..(band + (0.06 * h) as usize).min(height) {
        for j in 0..width {
            let period = 2 + j * 6 / width;
            img.set(i, j, if (j / period) % 2 == 0 { 0.9 } else { 0.1 });
        }
    }
    img.map(|v| v.clamp(0.05, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skyline_is_deterministic_and_in_range() {
        let a = skyline(64, 48, 3);
        assert_eq!(a, skyline(64, 48, 3));
        assert_ne!(a, skyline(64, 48, 4));
        assert!(a.data().iter().all(|v| (0.05..=0.95).contains(v)));
        let m = a.mean();
        let var = a.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64;
        assert!(var > 0.01);
    }
}
