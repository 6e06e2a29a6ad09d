//! Full-reference quality scores.

use crate::error::{ensure_same_shape, invalid, Result};
use crate::grid::Image;

/// Peak signal-to-noise ratio in dB for images sharing the intensity scale
/// of `peak`. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    if !(peak > 0.0) {
        return Err(invalid("peak must be positive"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (k, v) in w.iter_mut().enumerate() {
        let t = k as f64 - SSIM_RADIUS as f64;
        *v = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable filtering restricted to positions where the window fits.
fn filter_valid(data: &[f64], width: usize, height: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = w.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; height * ow];
    for i in 0..height {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|k| w[k] * data[i * width + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|k| w[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the positions
/// where the window fits, for intensities on a unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let (w, h) = a.shape();
    let n = 2 * SSIM_RADIUS + 1;
    if w < n || h < n {
        return Err(invalid(format!("SSIM needs at least {n}x{n} pixels")));
    }
    let win = gaussian_window();
    let (ad, bd) = (a.data(), b.data());
    let aa: Vec<f64> = ad.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bd.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| x * y).collect();
    let (ma, _, _) = filter_valid(ad, w, h, &win);
    let (mb, _, _) = filter_valid(bd, w, h, &win);
    let (saa, _, _) = filter_valid(&aa, w, h, &win);
    let (sbb, _, _) = filter_valid(&bb, w, h, &win);
    let (sab, _, _) = filter_valid(&ab, w, h, &win);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for k in 0..ma.len() {
        let (mx, my) = (ma[k], mb[k]);
        let vx = saa[k] - mx * mx;
        let vy = sbb[k] - my * my;
        let cxy = sab[k] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / ma.len() as f64)
}

/// Mean of the frames, pixel by pixel.
pub fn temporal_mean(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or_else(|| invalid("no frames"))?;
    let mut acc = first.zeros_like();
    for f in frames {
        ensure_same_shape(first.shape(), f.shape())?;
        acc.axpy(1.0, f);
    }
    let n = frames.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Mean of the unbiased local variance over all `l×l` windows that fit.
pub fn mean_local_variance(u: &Image, l: usize) -> Result<f64> {
    let (w, h) = u.shape();
    if l < 2 || l > w || l > h {
        return Err(invalid("window must fit inside the image and have at least 2 pixels per side"));
    }
    let box_w = vec![1.0; l];
    let sq: Vec<f64> = u.data().iter().map(|v| v * v).collect();
    let (s1, _, _) = filter_valid(u.data(), w, h, &box_w);
    let (s2, _, _) = filter_valid(&sq, w, h, &box_w);
    let n = (l * l) as f64;
    let total: f64 = s1.iter().zip(&s2).map(|(a, b)| ((b - a * a / n) / (n - 1.0)).max(0.0)).sum();
    Ok(total / s1.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_examples() {
        let a = random(1, 16, 12).map(|v| v * 200.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 10.0);
        let expect = 20.0 * (255.0f64 / 10.0).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 28.13).abs() < 0.005);
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(psnr(&a, &Image::zeros(3, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random(2, 32, 24);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = random(3, 32, 24);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let bin = Image::from_fn(32, 32, |i, j| if (i / 4 + j / 4) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.05);
        assert!(ssim(&a, &Image::zeros(4, 4)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        // Two constants: only the luminance term differs from 1.
        let a = Image::filled(16, 16, 0.2);
        let b = Image::filled(16, 16, 0.4);
        let c1 = K1 * K1;
        let expect = (2.0 * 0.2 * 0.4 + c1) / (0.04 + 0.16 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise_variance() {
        let clean = random(4, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let unit: Vec<f64> = (0..clean.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let noisy = Image::new(32, 32, clean.data().iter().zip(&unit).map(|(c, u)| c + amp * u).collect()).unwrap();
            let p = psnr(&clean, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn local_variance_oracle() {
        let u = random(6, 9, 7);
        let l = 3;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=7 - l {
            for j in 0..=9 - l {
                let vals: Vec<f64> = (0..l).flat_map(|a| (0..l).map(move |b| (a, b))).map(|(a, b)| u.get(i + a, j + b)).collect();
                let m = vals.iter().sum::<f64>() / 9.0;
                total += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
                count += 1;
            }
        }
        assert!((mean_local_variance(&u, l).unwrap() - total / count as f64).abs() < 1e-12);
        let m = temporal_mean(&[u.clone(), u.map(|v| v + 1.0)]).unwrap();
        assert!(m.max_abs_diff(&u.map(|v| v + 0.5)) < 1e-15);
    }
}
