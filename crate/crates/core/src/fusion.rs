//! Fusion of a registered sequence into one image by near-stationary patch
//! selection and spatial-temporal kernel regression.
//!
//! For every pixel the `L×L` patches of all frames are ranked by sharpness;
//! among the sharpest few, the one whose deformation moves least becomes
//! the reference `k*`. Each frame's center value is then corrected by an
//! asymmetric steering-kernel average driven by its local deformation, and
//! the corrected values are averaged over time with photometric weights.
//!
//! Offsets and displacements are `(row, col)` pairs, matching
//! [`crate::grid`]: the first component is `dx`, the second `dy`.

use rayon::prelude::*;

use crate::error::{ensure_same_shape, invalid, Result};
use crate::grid::Image;
use crate::registration::DeformationField;

/// Sharpness and movement energy of one frame's patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub k: usize,
    pub sharpness: f64,
    pub energy: f64,
}

/// Parameters of one steering kernel. `theta` is the oriented dominant
/// direction of motion; the symmetric kernel only depends on it modulo π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringKernelParams {
    pub theta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub r: f64,
}

/// Local orientation of a displacement patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// Principal axis angle in `[0, π)`.
    pub theta: f64,
    pub s1: f64,
    pub s2: f64,
    /// Principal axis turned to point along the mean displacement.
    pub direction: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Patch side `L` (odd).
    pub patch: usize,
    /// Size of the sharpness shortlist.
    pub top_k: usize,
    /// Movement energy above which the spatial correction runs.
    pub tau_e: f64,
    /// Steering kernel bandwidth in pixels.
    pub h: f64,
    pub lambda_p: f64,
    pub lambda_pp: f64,
    /// Noise variance in 8-bit units.
    pub sigma_n2: f64,
    /// Photometric smoothing parameter in 8-bit units.
    pub mu: f64,
    /// Steering-kernel regression of high-energy pixels before temporal
    /// fusion. Off by default: on smooth fields the kernels degenerate to
    /// wide boxes and blur more than they denoise.
    pub spatial_correction: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::with_patch(13)
    }
}

impl FusionConfig {
    /// Defaults for patch side `l`, with `tau_e = 0.5·l²`.
    pub fn with_patch(l: usize) -> Self {
        Self {
            patch: l,
            top_k: 10,
            tau_e: 0.5 * (l * l) as f64,
            h: 2.4,
            lambda_p: 1.0,
            lambda_pp: 0.01,
            sigma_n2: 2.0,
            mu: 5.0,
            spatial_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.patch < 3 {
            return Err(invalid("patch side must be odd and at least 3"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be positive"));
        }
        let positive = [self.h, self.lambda_p, self.lambda_pp, self.mu];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("h, lambda', lambda'' and mu must be positive"));
        }
        if !(self.tau_e >= 0.0 && self.sigma_n2 >= 0.0 && self.sigma_n2.is_finite()) {
            return Err(invalid("tau_e and sigma_n2 must be nonnegative"));
        }
        Ok(())
    }
}

/// Unbiased variance of the patch values.
pub fn patch_sharpness(patch: &[f64]) -> Result<f64> {
    if patch.len() < 2 {
        return Err(invalid("patch needs at least two pixels"));
    }
    let n = patch.len() as f64;
    let m = patch.iter().sum::<f64>() / n;
    Ok(patch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Sum of squared displacement lengths.
pub fn movement_energy(dx: &[f64], dy: &[f64]) -> Result<f64> {
    if dx.len() != dy.len() {
        return Err(invalid("displacement components differ in length"));
    }
    Ok(dx.iter().zip(dy).map(|(a, b)| a * a + b * b).sum())
}

/// Among the `top_k` sharpest patches (stable by frame order), the one with
/// least movement, ties going to the earlier entry.
pub fn select_near_stationary(stats: &[PatchStats], top_k: usize) -> Result<usize> {
    if stats.is_empty() {
        return Err(invalid("no patch statistics"));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].sharpness.total_cmp(&stats[a].sharpness));
    let mut short: Vec<usize> = order.into_iter().take(top_k.max(1)).collect();
    short.sort_unstable();
    let best = short
        .into_iter()
        .min_by(|&a, &b| stats[a].energy.total_cmp(&stats[b].energy).then(a.cmp(&b)))
        .expect("nonempty shortlist");
    Ok(stats[best].k)
}

fn moments(dx: &[f64], dy: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for (&a, &b) in dx.iter().zip(dy) {
        m[0] += a * a;
        m[1] += a * b;
        m[2] += b * b;
        m[3] += a;
        m[4] += b;
    }
    m
}

fn orientation_from_moments(m: &[f64; 5]) -> Orientation {
    let [a, b, c, sx, sy] = *m;
    if a == 0.0 && b == 0.0 && c == 0.0 {
        return Orientation {
            theta: 0.0,
            s1: 0.0,
            s2: 0.0,
            direction: (1.0, 0.0),
        };
    }
    // Eigen-decomposition of the 2×2 Gram matrix [[a, b], [b, c]].
    let half = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (half + rad, (half - rad).max(0.0));
    let mut theta = 0.5 * (2.0 * b).atan2(a - c);
    if theta < 0.0 {
        theta += std::f64::consts::PI;
    }
    if theta >= std::f64::consts::PI {
        theta -= std::f64::consts::PI;
    }
    let (mut v1, mut v2) = (theta.cos(), theta.sin());
    if v1 * sx + v2 * sy < 0.0 {
        v1 = -v1;
        v2 = -v2;
    }
    Orientation {
        theta,
        s1: l1.sqrt(),
        s2: l2.sqrt(),
        direction: (v1, v2),
    }
}

/// Principal axis of the `n×2` displacement matrix, via the closed-form
/// eigen-decomposition of its Gram matrix. An all-zero patch gives
/// `θ = 0, s1 = s2 = 0`.
pub fn dominant_orientation(dx: &[f64], dy: &[f64]) -> Result<Orientation> {
    if dx.len() != dy.len() || dx.is_empty() {
        return Err(invalid("displacement components must be nonempty and equal length"));
    }
    Ok(orientation_from_moments(&moments(dx, dy)))
}

/// Elongation `σ = (s1+λ')/(s2+λ')` and scaling `γ = sqrt((s1·s2+λ'')/M)`.
pub fn elongation_scaling(s1: f64, s2: f64, lp: f64, lpp: f64, m: usize) -> Result<(f64, f64)> {
    if !(lp > 0.0 && lpp > 0.0) || m == 0 {
        return Err(invalid("regularizers must be positive and the support nonempty"));
    }
    if !(s1 >= 0.0 && s2 >= 0.0) {
        return Err(invalid("singular values must be nonnegative"));
    }
    Ok(((s1 + lp) / (s2 + lp), ((s1 * s2 + lpp) / m as f64).sqrt()))
}

/// Asymmetric coefficient `0.5·sqrt(σ)` clamped to `(0, 1]`.
pub fn asymmetry(sigma: f64) -> f64 {
    (0.5 * sigma.sqrt()).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Kernel parameters for a displacement patch.
pub fn kernel_params(dx: &[f64], dy: &[f64], lp: f64, lpp: f64) -> Result<SteeringKernelParams> {
    let o = dominant_orientation(dx, dy)?;
    params_from_orientation(&o, dx.len(), lp, lpp)
}

fn params_from_orientation(o: &Orientation, m: usize, lp: f64, lpp: f64) -> Result<SteeringKernelParams> {
    let (sigma, gamma) = elongation_scaling(o.s1, o.s2, lp, lpp, m)?;
    Ok(SteeringKernelParams {
        theta: o.direction.1.atan2(o.direction.0),
        sigma,
        gamma,
        r: asymmetry(sigma),
    })
}

/// Components of `offset` along the dominant direction and across it.
#[inline]
fn project(p: &SteeringKernelParams, offset: (f64, f64)) -> (f64, f64) {
    let (c, s) = (p.theta.cos(), p.theta.sin());
    (c * offset.0 + s * offset.1, -s * offset.0 + c * offset.1)
}

/// `exp(−dᵀCd / 2h²)` with `C = γ·R(θ)·diag(σ, 1/σ)·R(θ)ᵀ`.
pub fn steering_kernel_symmetric(p: &SteeringKernelParams, offset: (f64, f64), h: f64) -> f64 {
    let (z, t) = project(p, offset);
    let q = p.gamma * (p.sigma * z * z + t * t / p.sigma);
    (-q / (2.0 * h * h)).exp()
}

/// Asymmetric steering kernel. Offsets against the dominant direction keep
/// the full along-axis variance while offsets with it are narrowed by `r`,
/// so weights favour the side the true value tends to lie on. With `r = 1`
/// this is exactly [`steering_kernel_symmetric`].
pub fn steering_kernel_asymmetric(p: &SteeringKernelParams, offset: (f64, f64), h: f64) -> f64 {
    let (along, t) = project(p, offset);
    let z = -along;
    let rho2 = h * h / (p.gamma * p.sigma);
    let across = p.gamma * t * t / p.sigma / (2.0 * h * h);
    let zq = if z > 0.0 {
        z * z / (2.0 * rho2)
    } else {
        z * z / (2.0 * p.r * p.r * rho2)
    };
    2.0 / (p.r + 1.0) * (-(zq + across)).exp()
}

/// Corrected center value of a `l×l` patch: unchanged when the movement
/// energy is at most `tau_e`, otherwise the asymmetric-kernel Nadaraya-Watson
/// average written as `center + Σw(r_j − center)/Σw`.
pub fn spatial_regress_pixel(patch: &[f64], dx: &[f64], dy: &[f64], l: usize, cfg: &FusionConfig) -> Result<f64> {
    if l % 2 == 0 || patch.len() != l * l || dx.len() != l * l || dy.len() != l * l {
        return Err(invalid("patch and field support must be l×l with odd l"));
    }
    let m = moments(dx, dy);
    Ok(regress_with_moments(patch, &m, l, cfg))
}

fn regress_with_moments(patch: &[f64], m: &[f64; 5], l: usize, cfg: &FusionConfig) -> f64 {
    let half = l / 2;
    let center = patch[half * l + half];
    if m[0] + m[2] <= cfg.tau_e {
        return center;
    }
    let o = orientation_from_moments(m);
    let p = params_from_orientation(&o, l * l, cfg.lambda_p, cfg.lambda_pp).expect("validated regularizers");
    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..l {
        for b in 0..l {
            let off = (a as f64 - half as f64, b as f64 - half as f64);
            let w = steering_kernel_asymmetric(&p, off, cfg.h);
            num += w * (patch[a * l + b] - center);
            den += w;
        }
    }
    center + num / den
}

/// Photometric weight `exp(2σn²/μ² − ‖r_k − r_δ‖²/(L²μ²))`; patches are given
/// on the unit scale and compared in 8-bit units.
pub fn temporal_weight(rk: &[f64], rdelta: &[f64], sigma_n2: f64, mu: f64) -> Result<f64> {
    if rk.len() != rdelta.len() || rk.is_empty() {
        return Err(invalid("patches must be nonempty and equal size"));
    }
    if !(mu > 0.0) {
        return Err(invalid("mu must be positive"));
    }
    let d2: f64 = rk.iter().zip(rdelta).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum();
    Ok(weight_from_distance(d2, rk.len(), sigma_n2, mu))
}

#[inline]
fn weight_from_distance(d2: f64, n: usize, sigma_n2: f64, mu: f64) -> f64 {
    (2.0 * sigma_n2 / (mu * mu) - d2 / (n as f64 * mu * mu)).exp()
}

/// Fused image with its per-pixel reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub z: Image,
    /// Chosen `k*` per pixel, row-major.
    pub k_star: Vec<u16>,
    /// Fraction of (pixel, frame) pairs that used the spatial correction.
    pub corrected_fraction: f64,
}

/// Writes `k_star` as a little-endian `u16` raster preceded by `width` and
/// `height` as `u32`.
pub fn write_index_map<W: std::io::Write>(map: &[u16], width: usize, height: usize, mut out: W) -> Result<()> {
    if map.len() != width * height {
        return Err(invalid("index map does not match its dimensions"));
    }
    out.write_all(&(width as u32).to_le_bytes())?;
    out.write_all(&(height as u32).to_le_bytes())?;
    for v in map {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Sums over each clamped `l×l` window.
fn box_sums(data: &[f64], w: usize, h: usize, l: usize) -> Vec<f64> {
    let r = (l / 2) as isize;
    let clampc = |j: isize| j.clamp(0, w as isize - 1) as usize;
    let clampr = |i: isize| i.clamp(0, h as isize - 1) as usize;
    let mut rows = vec![0.0; w * h];
    for i in 0..h {
        let src = &data[i * w..(i + 1) * w];
        for j in 0..w {
            rows[i * w + j] = (-r..=r).map(|d| src[clampc(j as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r).map(|d| rows[clampr(i as isize + d) * w + j]).sum();
        }
    }
    out
}

fn gather(data: &[f64], w: usize, h: usize, i: usize, j: usize, l: usize, out: &mut [f64]) {
    let r = (l / 2) as isize;
    let mut k = 0;
    for a in -r..=r {
        let ii = (i as isize + a).clamp(0, h as isize - 1) as usize;
        let row = &data[ii * w..(ii + 1) * w];
        for b in -r..=r {
            out[k] = row[(j as isize + b).clamp(0, w as isize - 1) as usize];
            k += 1;
        }
    }
}

/// Fuses registered frames. `fields` are the per-frame pull-back fields
/// (reference toward frame) used for movement energy and kernel shapes.
pub fn fuse(registered: &[Image], fields: &[DeformationField], cfg: &FusionConfig) -> Result<FusionResult> {
    cfg.validate()?;
    let first = registered.first().ok_or_else(|| invalid("no frames to fuse"))?;
    if registered.len() != fields.len() {
        return Err(invalid("need one deformation field per frame"));
    }
    if registered.len() > u16::MAX as usize + 1 {
        return Err(invalid("too many frames for a 16-bit index map"));
    }
    let (w, h) = first.shape();
    for (f, d) in registered.iter().zip(fields) {
        ensure_same_shape(first.shape(), f.shape())?;
        ensure_same_shape(first.shape(), d.shape())?;
    }
    let l = cfg.patch;
    let n = (l * l) as f64;
    let stats: Vec<(Vec<f64>, Vec<f64>)> = registered
        .par_iter()
        .zip(fields)
        .map(|(f, d)| {
            let sq: Vec<f64> = f.data().iter().map(|v| v * v).collect();
            let en: Vec<f64> = d.dx.data().iter().zip(d.dy.data()).map(|(a, b)| a * a + b * b).collect();
            let s1 = box_sums(f.data(), w, h, l);
            let s2 = box_sums(&sq, w, h, l);
            let sharp = s1.iter().zip(&s2).map(|(a, b)| ((b - a * a / n) / (n - 1.0)).max(0.0)).collect();
            (sharp, box_sums(&en, w, h, l))
        })
        .collect();

    let frames = registered.len();
    let rows: Vec<(Vec<f64>, Vec<u16>, usize)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut zrow = vec![0.0; w];
            let mut krow = vec![0u16; w];
            let mut corrected = 0;
            let mut ps = Vec::with_capacity(frames);
            let mut patch = vec![0.0; l * l];
            let mut ref_patch = vec![0.0; l * l];
            let (mut fx, mut fy) = (vec![0.0; l * l], vec![0.0; l * l]);
            let mut values = vec![0.0; frames];
            for j in 0..w {
                let x = i * w + j;
                ps.clear();
                ps.extend((0..frames).map(|k| PatchStats {
                    k,
                    sharpness: stats[k].0[x],
                    energy: stats[k].1[x],
                }));
                let ks = select_near_stationary(&ps, cfg.top_k).expect("nonempty stats");
                gather(registered[ks].data(), w, h, i, j, l, &mut ref_patch);
                let mut weights = vec![0.0; frames];
                for k in 0..frames {
                    gather(registered[k].data(), w, h, i, j, l, &mut patch);
                    let d2: f64 = patch.iter().zip(&ref_patch).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum();
                    weights[k] = weight_from_distance(d2, l * l, cfg.sigma_n2, cfg.mu);
                    values[k] = if cfg.spatial_correction && ps[k].energy > cfg.tau_e {
                        gather(fields[k].dx.data(), w, h, i, j, l, &mut fx);
                        gather(fields[k].dy.data(), w, h, i, j, l, &mut fy);
                        corrected += 1;
                        regress_with_moments(&patch, &moments(&fx, &fy), l, cfg)
                    } else {
                        registered[k].data()[x]
                    };
                }
                let base = values[ks];
                let (mut num, mut den) = (0.0, 0.0);
                for k in 0..frames {
                    num += weights[k] * (values[k] - base);
                    den += weights[k];
                }
                zrow[j] = base + num / den;
                krow[j] = ks as u16;
            }
            (zrow, krow, corrected)
        })
        .collect();
    let mut z = Vec::with_capacity(w * h);
    let mut k_star = Vec::with_capacity(w * h);
    let mut corrected = 0;
    for (zr, kr, c) in rows {
        z.extend(zr);
        k_star.extend(kr);
        corrected += c;
    }
    Ok(FusionResult {
        z: Image::new(w, h, z)?,
        k_star,
        corrected_fraction: corrected as f64 / (w * h * frames) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::FieldDirection;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params(theta: f64, sigma: f64, gamma: f64, r: f64) -> SteeringKernelParams {
        SteeringKernelParams { theta, sigma, gamma, r }
    }

    fn angle_diff_mod_pi(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(PI);
        d.min(PI - d)
    }

    #[test]
    fn sharpness_examples() {
        assert_eq!(patch_sharpness(&[0.3; 9]).unwrap(), 0.0);
        assert!((patch_sharpness(&[0.0, 1.0, 0.0, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let p = [0.1, 0.4, 0.2, 0.9, 0.5];
        let q: Vec<f64> = p.iter().map(|v| v + 3.0).collect();
        assert!((patch_sharpness(&p).unwrap() - patch_sharpness(&q).unwrap()).abs() < 1e-12);
        assert!(patch_sharpness(&[1.0]).is_err());
    }

    #[test]
    fn energy_examples() {
        assert_eq!(movement_energy(&[0.0; 169], &[0.0; 169]).unwrap(), 0.0);
        assert_eq!(movement_energy(&[1.0; 169], &[1.0; 169]).unwrap(), 338.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dx: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dy: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut e = 0.0;
        for k in 0..50 {
            e += dx[k] * dx[k] + dy[k] * dy[k];
        }
        assert!((movement_energy(&dx, &dy).unwrap() - e).abs() < 1e-12);
    }

    fn st(k: usize, s: f64, e: f64) -> PatchStats {
        PatchStats { k, sharpness: s, energy: e }
    }

    #[test]
    fn selection_examples() {
        let mut stats: Vec<PatchStats> = (0..15).map(|k| st(k, 1.0 + k as f64, 5.0)).collect();
        stats[12].energy = 0.0;
        assert_eq!(select_near_stationary(&stats, 10).unwrap(), 12);
        // Frame 2 is still-most but not sharp enough to be shortlisted.
        stats[2].energy = 0.0;
        stats[12].energy = 1.0;
        assert_eq!(select_near_stationary(&stats, 10).unwrap(), 12);
        let flat: Vec<PatchStats> = (0..12).map(|k| st(k, 1.0, 1.0)).collect();
        assert_eq!(select_near_stationary(&flat, 10).unwrap(), 0);
        assert!(select_near_stationary(&[], 10).is_err());
    }

    fn brute_select(stats: &[PatchStats], top: usize) -> usize {
        // A frame is shortlisted when fewer than `top` frames rank above it.
        let ranks_above = |a: usize| {
            (0..stats.len())
                .filter(|&b| stats[b].sharpness > stats[a].sharpness || (stats[b].sharpness == stats[a].sharpness && b < a))
                .count()
        };
        let mut best = usize::MAX;
        for a in 0..stats.len() {
            if ranks_above(a) >= top {
                continue;
            }
            if best == usize::MAX || stats[a].energy < stats[best].energy {
                best = a;
            }
        }
        stats[best].k
    }

    proptest! {
        #[test]
        fn selection_matches_exhaustive_scan(
            raw in prop::collection::vec((0u8..6, 0u8..6), 1..25), top in 1usize..12
        ) {
            let stats: Vec<PatchStats> = raw.iter().enumerate().map(|(k, &(s, e))| st(k, s as f64, e as f64)).collect();
            let got = select_near_stationary(&stats, top).unwrap();
            prop_assert_eq!(got, brute_select(&stats, top));
            let mut sharp: Vec<f64> = stats.iter().map(|s| s.sharpness).collect();
            sharp.sort_by(|a, b| b.total_cmp(a));
            let cutoff = sharp[top.min(stats.len()) - 1];
            prop_assert!(stats[got].sharpness >= cutoff);
        }

        #[test]
        fn orientation_is_flip_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dx: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dy: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = dominant_orientation(&dx, &dy).unwrap();
            let nx: Vec<f64> = dx.iter().map(|v| -v).collect();
            let ny: Vec<f64> = dy.iter().map(|v| -v).collect();
            let b = dominant_orientation(&nx, &ny).unwrap();
            prop_assert!(angle_diff_mod_pi(a.theta, b.theta) < 1e-12);
            prop_assert!((a.s1 - b.s1).abs() < 1e-12 && (a.s2 - b.s2).abs() < 1e-12);
        }

        #[test]
        fn regression_is_convex(seed in 0u64..300, amp in 0.5f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 7;
            let patch: Vec<f64> = (0..l * l).map(|_| rng.random_range(0.0..1.0)).collect();
            let dx: Vec<f64> = (0..l * l).map(|_| rng.random_range(-amp..amp)).collect();
            let dy: Vec<f64> = (0..l * l).map(|_| rng.random_range(-amp..amp) + 0.5).collect();
            let cfg = FusionConfig { tau_e: 0.0, ..FusionConfig::with_patch(l) };
            let v = spatial_regress_pixel(&patch, &dx, &dy, l, &cfg).unwrap();
            let lo = patch.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = patch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn sigma_grows_with_s1(s2 in 0.0f64..10.0, a in 0.0f64..10.0, d in 0.01f64..10.0) {
            let s1 = s2 + a;
            let (lo, _) = elongation_scaling(s1, s2, 1.0, 0.01, 169).unwrap();
            let (hi, _) = elongation_scaling(s1 + d, s2, 1.0, 0.01, 169).unwrap();
            prop_assert!(hi > lo && lo >= 1.0);
        }
    }

    #[test]
    fn orientation_examples() {
        let o = dominant_orientation(&[1.0; 9], &[1.0; 9]).unwrap();
        assert!(angle_diff_mod_pi(o.theta, PI / 4.0) < 1e-12);
        let o = dominant_orientation(&[1.0; 9], &[0.0; 9]).unwrap();
        assert!(angle_diff_mod_pi(o.theta, 0.0) < 1e-12);
        assert!(o.s2.abs() < 1e-12 && (o.s1 - 3.0).abs() < 1e-12);
        let z = dominant_orientation(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!((z.theta, z.s1, z.s2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn orientation_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = 169;
            let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) + 0.3 * dx[0]).collect();
            let m = DMatrix::from_fn(n, 2, |r, c| if c == 0 { dx[r] } else { dy[r] });
            let svd = m.svd(false, true);
            let v_t = svd.v_t.unwrap();
            let (mut s1, mut s2) = (svd.singular_values[0], svd.singular_values[1]);
            let mut row = 0;
            if s2 > s1 {
                std::mem::swap(&mut s1, &mut s2);
                row = 1;
            }
            let theta = v_t[(row, 1)].atan2(v_t[(row, 0)]);
            let o = dominant_orientation(&dx, &dy).unwrap();
            assert!(angle_diff_mod_pi(o.theta, theta) < 1e-8);
            assert!((o.s1 - s1).abs() < 1e-8 && (o.s2 - s2).abs() < 1e-8);
        }
    }

    #[test]
    fn elongation_examples() {
        let (s, g) = elongation_scaling(0.0, 0.0, 1.0, 0.01, 169).unwrap();
        assert_eq!(s, 1.0);
        assert!((g - (0.01f64 / 169.0).sqrt()).abs() < 1e-15);
        assert_eq!(elongation_scaling(3.0, 1.0, 1.0, 0.01, 169).unwrap().0, 2.0);
        assert!(elongation_scaling(1.0, 1.0, 0.0, 0.01, 9).is_err());
    }

    #[test]
    fn symmetric_kernel_shape() {
        let iso = params(0.7, 1.0, 0.8, 1.0);
        let a = steering_kernel_symmetric(&iso, (3.0, 0.0), 2.4);
        let b = steering_kernel_symmetric(&iso, (0.0, 3.0), 2.4);
        let c = steering_kernel_symmetric(&iso, (3.0f64.sqrt() * 1.5, 1.5), 2.4);
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        let p = params(0.4, 3.0, 0.8, 1.0);
        assert_eq!(steering_kernel_symmetric(&p, (0.0, 0.0), 2.4), 1.0);
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        for d in [0.5, 1.0, 2.0, 4.0] {
            let along = steering_kernel_symmetric(&p, (c * d, s * d), 2.4);
            let across = steering_kernel_symmetric(&p, (-s * d, c * d), 2.4);
            assert!(along < across);
            assert!(along < 1.0);
        }
    }

    #[test]
    fn asymmetric_kernel_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = params(rng.random_range(-PI..PI), rng.random_range(1.0..5.0), rng.random_range(0.1..2.0), 1.0);
            let off = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let a = steering_kernel_asymmetric(&p, off, 2.4);
            let s = steering_kernel_symmetric(&p, off, 2.4);
            assert!((a - s).abs() < 1e-12);
        }
        let p = params(0.9, 2.0, 0.7, asymmetry(2.0));
        assert!(p.r < 1.0);
        let peak = steering_kernel_asymmetric(&p, (0.0, 0.0), 2.4);
        let (c, s) = (0.9f64.cos(), 0.9f64.sin());
        for d in [0.5, 1.0, 2.5, 5.0] {
            let against = steering_kernel_asymmetric(&p, (-c * d, -s * d), 2.4);
            let with = steering_kernel_asymmetric(&p, (c * d, s * d), 2.4);
            assert!(against >= with);
            assert!(peak > against);
        }
    }

    #[test]
    fn regression_examples() {
        let l = 3;
        let cfg = FusionConfig::with_patch(l);
        let patch = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let zero = [0.0; 9];
        assert_eq!(spatial_regress_pixel(&patch, &zero, &zero, l, &cfg).unwrap(), 0.5);
        let big = [3.0; 9];
        let v = spatial_regress_pixel(&[0.37; 9], &big, &zero, l, &cfg).unwrap();
        assert!((v - 0.37).abs() < 1e-15);

        // Hand computation: displacements all (2, 0) give θ = 0, s1 = 6, s2 = 0,
        // σ = 7, γ = sqrt(0.01/9), r = 1, so weights are Gaussian in the
        // row offset a with variance h²/(γσ) and in the column offset b with
        // variance h²σ/γ.
        let dx = [2.0; 9];
        let v = spatial_regress_pixel(&patch, &dx, &zero, l, &cfg).unwrap();
        let gamma = (0.01f64 / 9.0).sqrt();
        let (sa, sb) = (2.4 * 2.4 / (gamma * 7.0), 2.4 * 2.4 * 7.0 / gamma);
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..3 {
            for b in 0..3 {
                let (da, db) = (a as f64 - 1.0, b as f64 - 1.0);
                let w = (-da * da / (2.0 * sa) - db * db / (2.0 * sb)).exp();
                num += w * patch[a * 3 + b];
                den += w;
            }
        }
        assert!((v - num / den).abs() < 1e-12);
    }

    #[test]
    fn temporal_weight_examples() {
        let a = [0.2, 0.4, 0.6, 0.8];
        assert!((temporal_weight(&a, &a, 2.0, 5.0).unwrap() - (4.0f64 / 25.0).exp()).abs() < 1e-15);
        let b = [0.2, 0.4, 0.6, 0.8 + 2.0 / 255.0];
        // ‖Δ‖² = 4 in 8-bit units, L² = 4.
        let expect = (4.0f64 / 25.0 - 4.0 / (4.0 * 25.0)).exp();
        assert!((temporal_weight(&a, &b, 2.0, 5.0).unwrap() - expect).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for d in [0.0, 0.01, 0.02, 0.05] {
            let c = [0.2 + d, 0.4, 0.6, 0.8];
            let w = temporal_weight(&a, &c, 2.0, 5.0).unwrap();
            assert!(w < last);
            last = w;
        }
    }

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    fn zero_fields(n: usize, w: usize, h: usize) -> Vec<DeformationField> {
        (0..n).map(|_| DeformationField::zeros(w, h, FieldDirection::PullBack)).collect()
    }

    #[test]
    fn identical_frames_fuse_exactly() {
        let u = textured(24, 20, 1);
        let frames = vec![u.clone(); 5];
        let r = fuse(&frames, &zero_fields(5, 24, 20), &FusionConfig::default()).unwrap();
        assert_eq!(r.z, u);
        assert!(r.k_star.iter().all(|&k| k == 0));
        let moving: Vec<DeformationField> =
            (0..5).map(|_| DeformationField::constant(24, 20, 1.5, -1.0, FieldDirection::PullBack)).collect();
        let flat = vec![Image::filled(24, 20, 0.3); 5];
        let spatial = FusionConfig { spatial_correction: true, ..FusionConfig::default() };
        let r = fuse(&flat, &moving, &spatial).unwrap();
        assert!(r.z.max_abs_diff(&flat[0]) < 1e-15);
        assert!(r.corrected_fraction > 0.99);
        assert!(fuse(&[], &[], &FusionConfig::default()).is_err());
    }

    #[test]
    fn noise_averaging() {
        let (w, h) = (40, 40);
        let clean = Image::from_fn(w, h, |i, j| 0.5 + 0.3 * ((i as f64) / 6.0).sin() * ((j as f64) / 8.0).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = rand_distr::Normal::new(0.0, 0.02).unwrap();
        let frames: Vec<Image> = (0..20)
            .map(|_| {
                let noise: Vec<f64> = (0..w * h).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
                Image::new(w, h, clean.data().iter().zip(&noise).map(|(c, e)| c + e).collect()).unwrap()
            })
            .collect();
        let mse = |a: &Image| a.data().iter().zip(clean.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
        let r = fuse(&frames, &zero_fields(20, w, h), &FusionConfig::default()).unwrap();
        assert!(mse(&r.z) < mse(&frames[0]) / 4.0, "{} vs {}", mse(&r.z), mse(&frames[0]));
    }

    #[test]
    fn fuse_is_convex_per_pixel() {
        let (w, h) = (18, 16);
        let frames: Vec<Image> = (0..6).map(|k| textured(w, h, 10 + k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fields: Vec<DeformationField> = (0..6)
            .map(|_| DeformationField::constant(w, h, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), FieldDirection::PullBack))
            .collect();
        let r = fuse(&frames, &fields, &FusionConfig::with_patch(5)).unwrap();
        for x in 0..w * h {
            // Each output mixes values from the 5×5 neighbourhoods of all frames.
            let (i, j) = (x / w, x % w);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for f in &frames {
                for a in -2isize..=2 {
                    for b in -2isize..=2 {
                        let v = f.get_clamped(i as isize + a, j as isize + b);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            assert!(r.z.data()[x] >= lo - 1e-12 && r.z.data()[x] <= hi + 1e-12);
        }
    }

    #[test]
    fn fuse_is_shift_equivariant_with_zero_fields() {
        let (w, h) = (30, 26);
        let frames: Vec<Image> = (0..4).map(|k| textured(w, h, 20 + k).map(|v| 0.5 + 0.02 * v)).collect();
        let (si, sj) = (3usize, 2usize);
        let shifted: Vec<Image> = frames
            .iter()
            .map(|f| Image::from_fn(w, h, |i, j| f.get_clamped(i as isize - si as isize, j as isize - sj as isize)))
            .collect();
        let cfg = FusionConfig::with_patch(5);
        let a = fuse(&frames, &zero_fields(4, w, h), &cfg).unwrap().z;
        let b = fuse(&shifted, &zero_fields(4, w, h), &cfg).unwrap().z;
        let margin = 2 + 3;
        for i in margin..h - margin {
            for j in margin..w - margin {
                assert!((b.get(i, j) - a.get(i - si, j - sj)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn index_map_layout() {
        let mut buf = Vec::new();
        write_index_map(&[1, 2, 3, 513], 2, 2, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8);
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(&buf[14..16], &513u16.to_le_bytes());
        assert!(write_index_map(&[1], 2, 2, &mut buf).is_err());
    }
}
