//! Synthetic turbulence: random B-spline warps, motion-dependent local blur
//! and a diffraction-limited disc, following `f_i = D_i(H(u)) + ε_i`.
//!
//! Every frame draws from its own ChaCha8 stream (`seed_from_u64(seed)`
//! followed by `set_stream(frame)`), so frames can be generated in any
//! order, in parallel, with byte-identical results.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::deconv::{convolve_invariant, Psf};
use crate::error::{invalid, Error, Result};
use crate::grid::Image;
use crate::registration::{field_from_grid, warp, BsplineGrid, DeformationField, FieldDirection};

/// Named parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Identity,
    Weak,
    Strong,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Identity => "identity",
            Preset::Weak => "weak",
            Preset::Strong => "strong",
            Preset::Custom => "custom",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Preset::Identity),
            "weak" => Ok(Preset::Weak),
            "strong" => Ok(Preset::Strong),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// Degradation settings. Noise variance is in 8-bit units; images are in
/// `[0, 1]`, so the noise standard deviation applied is `sqrt(sigma_n2)/255`.
#[derive(Debug, Clone, PartialEq)]
pub struct TurbulenceConfig {
    pub preset: Preset,
    /// Variance of the control-point offsets, px².
    pub sigma_d2: f64,
    /// Control-point spacing, px.
    pub d_g: usize,
    pub sigma_n2: f64,
    pub disc_radius: f64,
    pub n_frames: usize,
    pub rng_seed: u64,
    /// Local PSF variance per unit of mean squared displacement.
    pub blur_c: f64,
}

impl TurbulenceConfig {
    fn base(preset: Preset, sigma_d2: f64, d_g: usize, sigma_n2: f64, disc_radius: f64) -> Self {
        Self {
            preset,
            sigma_d2,
            d_g,
            sigma_n2,
            disc_radius,
            n_frames: 40,
            rng_seed: 0,
            blur_c: 0.25,
        }
    }

    pub fn weak() -> Self {
        Self::base(Preset::Weak, 4.0, 32, 3.0, 2.0)
    }

    pub fn strong() -> Self {
        Self::base(Preset::Strong, 10.0, 16, 16.0, 2.0)
    }

    /// No warp, no blur, no noise.
    pub fn identity() -> Self {
        Self::base(Preset::Identity, 0.0, 16, 0.0, 0.0)
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Identity => Self::identity(),
            Preset::Weak => Self::weak(),
            Preset::Strong => Self::strong(),
            Preset::Custom => Self {
                preset: Preset::Custom,
                ..Self::weak()
            },
        }
    }

    pub fn with_frames(mut self, n: usize) -> Self {
        self.n_frames = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma_d2, self.sigma_n2, self.disc_radius, self.blur_c].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("turbulence parameters must be finite".into()));
        }
        if self.sigma_d2 < 0.0 || self.sigma_n2 < 0.0 || self.blur_c < 0.0 {
            return Err(Error::Config("variances must be nonnegative".into()));
        }
        if self.d_g < 4 {
            return Err(Error::Config("control spacing d_g must be at least 4".into()));
        }
        if self.disc_radius < 0.0 {
            return Err(Error::Config("disc radius must be nonnegative".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("need at least one frame".into()));
        }
        Ok(())
    }

    /// `key=value` lines describing the configuration.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset={}", self.preset.name());
        let _ = writeln!(s, "seed={}", self.rng_seed);
        let _ = writeln!(s, "sigma_d2={}", self.sigma_d2);
        let _ = writeln!(s, "d_g={}", self.d_g);
        let _ = writeln!(s, "sigma_n2={}", self.sigma_n2);
        let _ = writeln!(s, "disc_radius={}", self.disc_radius);
        let _ = writeln!(s, "n_frames={}", self.n_frames);
        let _ = writeln!(s, "blur_c={}", self.blur_c);
        s
    }

    /// Parses [`manifest`](Self::manifest) output. Unknown keys are errors;
    /// missing keys keep the values of the named preset.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Custom,
        };
        let mut cfg = Self::from_preset(preset);
        for (k, v) in &pairs {
            match k.as_str() {
                "preset" => {}
                "seed" => cfg.rng_seed = parse_value(k, v)?,
                "sigma_d2" => cfg.sigma_d2 = parse_value(k, v)?,
                "d_g" => cfg.d_g = parse_value(k, v)?,
                "sigma_n2" => cfg.sigma_n2 = parse_value(k, v)?,
                "disc_radius" => cfg.disc_radius = parse_value(k, v)?,
                "n_frames" => cfg.n_frames = parse_value(k, v)?,
                "blur_c" => cfg.blur_c = parse_value(k, v)?,
                other => return Err(Error::Config(format!("unknown manifest key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, ignoring blank lines and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

/// Parses one config value, naming the key in the error.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value for {key}: '{value}'")))
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

fn fill_offsets(g: &mut BsplineGrid, sigma_d2: f64, rng: &mut impl Rng) {
    if sigma_d2 == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma_d2.sqrt()).expect("finite nonnegative std");
    for v in g.dx.iter_mut().chain(g.dy.iter_mut()) {
        *v = normal.sample(rng);
    }
}

/// Control lattice with i.i.d. `N(0, σ_d²)` offsets on both axes.
pub fn random_grid(width: usize, height: usize, cfg: &TurbulenceConfig, frame: usize) -> Result<BsplineGrid> {
    cfg.validate()?;
    let mut g = BsplineGrid::zeros(width, height, cfg.d_g)?;
    fill_offsets(&mut g, cfg.sigma_d2, &mut frame_rng(cfg.rng_seed, frame));
    Ok(g)
}

/// Dense pull-back field interpolated from a [`random_grid`] lattice.
pub fn random_deformation(width: usize, height: usize, cfg: &TurbulenceConfig, frame: usize) -> Result<DeformationField> {
    Ok(field_from_grid(&random_grid(width, height, cfg, frame)?, FieldDirection::PullBack))
}

/// Indicator of pixel centers within `radius` of the origin, normalized.
pub fn disc_psf(radius: f64) -> Result<Psf> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(invalid("disc radius must be finite and nonnegative"));
    }
    let n = 2 * radius.floor() as usize + 1;
    Psf::disc(n, n, radius)
}

/// Raised-cosine weight of window `c` (centered at `c·s`, support `2s`)
/// at position `t`. Neighbouring windows sum to one.
fn hann(t: f64, c: isize, s: f64) -> f64 {
    let d = (t - c as f64 * s) / s;
    if d.abs() >= 1.0 {
        0.0
    } else {
        (0.5 * std::f64::consts::PI * d).cos().powi(2)
    }
}

/// Overlap-add windows along one axis: for each window index, the range
/// of pixels it covers and their weights.
struct AxisWindows {
    spans: Vec<(usize, Vec<f64>)>,
}

impl AxisWindows {
    fn new(extent: usize, s: usize) -> Self {
        let last = (extent - 1) / s + 1;
        let sf = s as f64;
        let spans = (0..=last)
            .map(|c| {
                let lo = (c as isize - 1) * s as isize + 1;
                let lo = lo.max(0) as usize;
                let hi = ((c + 1) * s).min(extent);
                let w = (lo..hi).map(|t| hann(t as f64, c as isize, sf)).collect();
                (lo, w)
            })
            .collect();
        Self { spans }
    }

    fn count(&self) -> usize {
        self.spans.len()
    }
}

/// Sum of all window weights at every pixel; used to check partition of unity.
pub fn window_sum(width: usize, height: usize, spacing: usize) -> Result<Image> {
    if spacing == 0 || width == 0 || height == 0 {
        return Err(invalid("window spacing and image must be nonempty"));
    }
    let (rw, cw) = (AxisWindows::new(height, spacing), AxisWindows::new(width, spacing));
    let mut out = Image::zeros(width, height);
    for (r0, rws) in &rw.spans {
        for (c0, cws) in &cw.spans {
            for (a, wa) in rws.iter().enumerate() {
                for (b, wb) in cws.iter().enumerate() {
                    let (i, j) = (r0 + a, c0 + b);
                    out.set(i, j, out.get(i, j) + wa * wb);
                }
            }
        }
    }
    Ok(out)
}

fn gaussian_taps(variance: f64) -> Vec<f64> {
    let sigma = variance.sqrt();
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut t: Vec<f64> = (0..=2 * r)
        .map(|k| {
            let x = k as f64 - r as f64;
            (-x * x / (2.0 * variance)).exp()
        })
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable blur of `u` evaluated only on rows `r0..r1`, cols `c0..c1`,
/// with edge replication.
fn blur_region(u: &Image, taps: &[f64], r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
    let (w, h) = u.shape();
    let r = (taps.len() / 2) as isize;
    let lo = (r0 as isize - r).max(0) as usize;
    let hi = ((r1 as isize + r) as usize).min(h);
    let cols = c1 - c0;
    let mut tmp = vec![0.0; (hi - lo) * cols];
    for i in lo..hi {
        let row = u.row(i);
        for (jj, t) in tmp[(i - lo) * cols..(i - lo + 1) * cols].iter_mut().enumerate() {
            let j = (c0 + jj) as isize;
            *t = taps
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * row[(j + k as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; (r1 - r0) * cols];
    for ii in 0..(r1 - r0) {
        let i = (r0 + ii) as isize;
        for jj in 0..cols {
            out[ii * cols + jj] = taps
                .iter()
                .enumerate()
                .map(|(k, wk)| {
                    let src = (i + k as isize - r).clamp(lo as isize, hi as isize - 1) as usize;
                    wk * tmp[(src - lo) * cols + jj]
                })
                .sum();
        }
    }
    out
}

/// Space-varying Gaussian blur driven by local motion. Each overlap-add cell
/// (raised-cosine windows of width `2·d_g` at 50% overlap) gets a Gaussian
/// PSF with variance `c · (window-weighted mean of |f|²)`; the output is
/// `Σ_c w_c · (h_c ⊗ u)`, so constants are preserved exactly by the
/// partition of unity.
pub fn space_varying_blur(u: &Image, field: &DeformationField, d_g: usize, c: f64) -> Result<Image> {
    crate::error::ensure_same_shape(u.shape(), field.shape())?;
    if d_g == 0 {
        return Err(invalid("cell spacing must be positive"));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid("blur constant must be finite and nonnegative"));
    }
    let (w, h) = u.shape();
    let energy: Vec<f64> = field.dx.data().iter().zip(field.dy.data()).map(|(a, b)| a * a + b * b).collect();
    if c == 0.0 || energy.iter().all(|&e| e == 0.0) {
        return Ok(u.clone());
    }
    let (rw, cw) = (AxisWindows::new(h, d_g), AxisWindows::new(w, d_g));
    let cells: Vec<(usize, usize)> = (0..rw.count()).flat_map(|a| (0..cw.count()).map(move |b| (a, b))).collect();
    let parts: Vec<(usize, usize, usize, usize, Vec<f64>)> = cells
        .par_iter()
        .map(|&(a, b)| {
            let (r0, rws) = &rw.spans[a];
            let (c0, cws) = &cw.spans[b];
            let (r1, c1) = (r0 + rws.len(), c0 + cws.len());
            let (mut num, mut den) = (0.0, 0.0);
            for (ia, wa) in rws.iter().enumerate() {
                for (jb, wb) in cws.iter().enumerate() {
                    let ww = wa * wb;
                    num += ww * energy[(r0 + ia) * w + c0 + jb];
                    den += ww;
                }
            }
            let var = if den > 0.0 { c * num / den } else { 0.0 };
            let blurred = if var > 1e-12 {
                blur_region(u, &gaussian_taps(var), *r0, r1, *c0, c1)
            } else {
                (*r0..r1).flat_map(|i| u.row(i)[*c0..c1].to_vec()).collect()
            };
            let cols = c1 - c0;
            let weighted = blurred
                .iter()
                .enumerate()
                .map(|(k, v)| rws[k / cols] * cws[k % cols] * v)
                .collect();
            (*r0, r1, *c0, c1, weighted)
        })
        .collect();
    let mut out = Image::zeros(w, h);
    let od = out.data_mut();
    for (r0, r1, c0, c1, vals) in parts {
        let cols = c1 - c0;
        for i in r0..r1 {
            for j in c0..c1 {
                od[i * w + j] += vals[(i - r0) * cols + (j - c0)];
            }
        }
    }
    Ok(out)
}

/// Degrades `truth` into a sequence: disc blur, random warp with local blur,
/// then additive Gaussian noise. Returns the frames and their true
/// pull-back fields.
pub fn degrade(truth: &Image, cfg: &TurbulenceConfig) -> Result<(Vec<Image>, Vec<DeformationField>)> {
    cfg.validate()?;
    if !truth.all_finite() {
        return Err(invalid("truth image has non-finite values"));
    }
    let (w, h) = truth.shape();
    let disc = disc_psf(cfg.disc_radius)?;
    let sharp = if disc.data().len() == 1 {
        truth.clone()
    } else {
        convolve_invariant(truth, &disc)
    };
    let std = cfg.sigma_n2.sqrt() / 255.0;
    let pairs: Result<Vec<(Image, DeformationField)>> = (0..cfg.n_frames)
        .into_par_iter()
        .map(|k| {
            let mut rng = frame_rng(cfg.rng_seed, k);
            let mut g = BsplineGrid::zeros(w, h, cfg.d_g)?;
            fill_offsets(&mut g, cfg.sigma_d2, &mut rng);
            let field = field_from_grid(&g, FieldDirection::PullBack);
            let warped = warp(&sharp, &field)?;
            let mut frame = space_varying_blur(&warped, &field, cfg.d_g, cfg.blur_c)?;
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                frame.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            Ok((frame, field))
        })
        .collect();
    Ok(pairs?.into_iter().unzip())
}
