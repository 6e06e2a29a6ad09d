//! End-to-end restoration and the operations behind the `turbmend` tool.
//!
//! [`restore_frames`] runs the four stages in order: low-rank reference,
//! variational enhancement with registration, fusion, deblurring. When an
//! output directory is given, each stage's image is written before the
//! next stage starts, and one JSON record per stage is appended to
//! `run_log.jsonl`.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::deconv::{blind_deconvolve, non_blind_deconvolve, DeconvParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse, write_index_map, FusionConfig};
use crate::grid::Image;
use crate::imageio::{frame_name, read_frames, read_gray, write_atomic, write_png16};
use crate::metrics::{psnr, ssim};
use crate::nltv::{build_graph, GraphParams};
use crate::registration::RegistrationConfig;
use crate::rpca::{frames_to_matrix, reference_from_lowrank, rpca_decompose, RpcaOptions};
use crate::simulator::{degrade, disc_psf, parse_key_values, parse_value, TurbulenceConfig};
use crate::variational::{
    enhance_reference, solve_fast, solve_split_bregman, CgOptions, MixedRofProblem, RofParams, SolveOptions,
    VariationalConfig,
};

/// How the fused image is deblurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeconvMode {
    /// Blind, with the simulated-data knobs (5, 5, 0.03, 0.2).
    Simulated,
    /// Blind, with the real-data knobs (7, 7, 0.03, 0.5).
    Real,
    /// Blind, with the knobs given in the config.
    Custom,
    /// Non-blind with a disc of `disc_radius`.
    NonBlind,
    Off,
}

impl DeconvMode {
    pub fn name(self) -> &'static str {
        match self {
            DeconvMode::Simulated => "simulated",
            DeconvMode::Real => "real",
            DeconvMode::Custom => "custom",
            DeconvMode::NonBlind => "nonblind",
            DeconvMode::Off => "off",
        }
    }
}

impl FromStr for DeconvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(DeconvMode::Simulated),
            "real" => Ok(DeconvMode::Real),
            "custom" => Ok(DeconvMode::Custom),
            "nonblind" => Ok(DeconvMode::NonBlind),
            "off" => Ok(DeconvMode::Off),
            other => Err(Error::Config(format!("unknown deconv mode '{other}'"))),
        }
    }
}

/// Every tunable of the restoration. Config files use `key=value` lines with
/// the field names as keys, except the four deblurring knobs, which keep
/// their conventional names `kernelWidth`, `kernelHeight`, `noiseStr` and
/// `deblurStrength`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub reg_spacing: usize,
    pub reg_levels: usize,
    pub reg_beta: f64,
    pub reg_iterations: usize,
    /// Fusion patch side `L`.
    pub patch_size: usize,
    pub nltv_patch: usize,
    pub nltv_window: usize,
    pub nltv_k: usize,
    pub nltv_h: f64,
    pub out_loop: usize,
    pub middle_loop: usize,
    pub inner_loop: usize,
    pub rof_iterations: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub delta: f64,
    pub rpca_tol: f64,
    pub rpca_max_iter: usize,
    /// Fusion noise variance, 8-bit units.
    pub sigma_n2: f64,
    pub fusion_mu: f64,
    pub tau_e: f64,
    pub steering_h: f64,
    pub spatial_correction: bool,
    pub deconv: DeconvModeName,
    #[serde(rename = "kernelWidth")]
    pub kernel_width: usize,
    #[serde(rename = "kernelHeight")]
    pub kernel_height: usize,
    #[serde(rename = "noiseStr")]
    pub noise_str: f64,
    #[serde(rename = "deblurStrength")]
    pub deblur_strength: f64,
    pub disc_radius: f64,
    pub seed: u64,
}

/// Serializable wrapper around [`DeconvMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvModeName(pub DeconvMode);

impl Serialize for DeconvModeName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.0.name())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let d = DeconvParams::simulated();
        Self {
            reg_spacing: 16,
            reg_levels: RegistrationConfig::default().levels,
            reg_beta: RegistrationConfig::default().beta,
            reg_iterations: RegistrationConfig::default().iterations,
            patch_size: 13,
            nltv_patch: 5,
            nltv_window: 21,
            nltv_k: 10,
            nltv_h: GraphParams::default().h,
            out_loop: 1,
            middle_loop: 3,
            inner_loop: 10,
            rof_iterations: 10,
            lambda1: 0.02,
            lambda2: 0.02,
            mu1: 0.5,
            mu2: 0.25,
            delta: 1.0,
            rpca_tol: 1e-7,
            rpca_max_iter: 500,
            sigma_n2: 2.0,
            fusion_mu: 5.0,
            tau_e: 0.5 * 13.0 * 13.0,
            steering_h: 2.4,
            spatial_correction: false,
            deconv: DeconvModeName(DeconvMode::Simulated),
            kernel_width: d.kernel_width,
            kernel_height: d.kernel_height,
            noise_str: d.noise_str,
            deblur_strength: d.deblur_strength,
            disc_radius: 2.0,
            seed: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: '{v}'"))),
    }
}

impl PipelineConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "reg_spacing" => self.reg_spacing = parse_value(key, v)?,
            "reg_levels" => self.reg_levels = parse_value(key, v)?,
            "reg_beta" => self.reg_beta = parse_value(key, v)?,
            "reg_iterations" => self.reg_iterations = parse_value(key, v)?,
            "patch_size" => {
                self.patch_size = parse_value(key, v)?;
            }
            "nltv_patch" => self.nltv_patch = parse_value(key, v)?,
            "nltv_window" => self.nltv_window = parse_value(key, v)?,
            "nltv_k" => self.nltv_k = parse_value(key, v)?,
            "nltv_h" => self.nltv_h = parse_value(key, v)?,
            "out_loop" => self.out_loop = parse_value(key, v)?,
            "middle_loop" => self.middle_loop = parse_value(key, v)?,
            "inner_loop" => self.inner_loop = parse_value(key, v)?,
            "rof_iterations" => self.rof_iterations = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "mu1" => self.mu1 = parse_value(key, v)?,
            "mu2" => self.mu2 = parse_value(key, v)?,
            "delta" => self.delta = parse_value(key, v)?,
            "rpca_tol" => self.rpca_tol = parse_value(key, v)?,
            "rpca_max_iter" => self.rpca_max_iter = parse_value(key, v)?,
            "sigma_n2" => self.sigma_n2 = parse_value(key, v)?,
            "fusion_mu" => self.fusion_mu = parse_value(key, v)?,
            "tau_e" => self.tau_e = parse_value(key, v)?,
            "steering_h" => self.steering_h = parse_value(key, v)?,
            "spatial_correction" => self.spatial_correction = parse_bool(key, v)?,
            "deconv" => self.set_deconv(v.parse()?),
            "kernelWidth" => self.kernel_width = parse_value(key, v)?,
            "kernelHeight" => self.kernel_height = parse_value(key, v)?,
            "noiseStr" => self.noise_str = parse_value(key, v)?,
            "deblurStrength" => self.deblur_strength = parse_value(key, v)?,
            "disc_radius" => self.disc_radius = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Selects a deblurring mode; the blind presets also load their knobs.
    pub fn set_deconv(&mut self, mode: DeconvMode) {
        self.deconv = DeconvModeName(mode);
        let preset = match mode {
            DeconvMode::Simulated => DeconvParams::simulated(),
            DeconvMode::Real => DeconvParams::real(),
            _ => return,
        };
        self.kernel_width = preset.kernel_width;
        self.kernel_height = preset.kernel_height;
        self.noise_str = preset.noise_str;
        self.deblur_strength = preset.deblur_strength;
    }

    /// Parses a config file. A `deconv` line is applied first so explicit
    /// knob lines override the preset it loads.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "deconv") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "deconv") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(&fs::read_to_string(path)?)
    }

    /// The config as `key=value` lines accepted by [`from_key_values`](Self::from_key_values).
    pub fn to_key_values(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        if let Value::Object(map) = v {
            let _ = writeln!(s, "deconv={}", self.deconv.0.name());
            for (k, val) in map {
                if k == "deconv" {
                    continue;
                }
                let _ = match val {
                    Value::String(t) => writeln!(s, "{k}={t}"),
                    other => writeln!(s, "{k}={other}"),
                };
            }
        }
        s
    }

    pub fn rof_params(&self) -> RofParams {
        RofParams {
            mu1: self.mu1,
            mu2: self.mu2,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            spacing: self.reg_spacing,
            levels: self.reg_levels,
            beta: self.reg_beta,
            iterations: self.reg_iterations,
        }
    }

    pub fn graph(&self) -> GraphParams {
        GraphParams {
            patch: self.nltv_patch,
            window: self.nltv_window,
            k: self.nltv_k,
            h: self.nltv_h,
        }
    }

    pub fn variational(&self) -> VariationalConfig {
        VariationalConfig {
            rof: self.rof_params(),
            delta: self.delta,
            middle_loop: self.middle_loop,
            inner_loop: self.inner_loop,
            rof_iterations: self.rof_iterations,
            graph: self.graph(),
            registration: self.registration(),
            ..VariationalConfig::default()
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            patch: self.patch_size,
            tau_e: self.tau_e,
            h: self.steering_h,
            sigma_n2: self.sigma_n2,
            mu: self.fusion_mu,
            spatial_correction: self.spatial_correction,
            ..FusionConfig::with_patch(self.patch_size)
        }
    }

    pub fn deconv_params(&self) -> DeconvParams {
        DeconvParams {
            kernel_width: self.kernel_width,
            kernel_height: self.kernel_height,
            noise_str: self.noise_str,
            deblur_strength: self.deblur_strength,
            ..DeconvParams::simulated()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let loops = [self.out_loop, self.middle_loop, self.inner_loop, self.rof_iterations];
        if loops.iter().any(|&n| n == 0) {
            return Err(Error::Config("loop counts must be at least 1".into()));
        }
        let rof = self.rof_params();
        rof.validate()?;
        if !rof.is_admissible() {
            return Err(Error::Config(format!(
                "lambda1={} lambda2={} violate the step bound 20*lambda1 + 4*lambda2 < 1",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if self.reg_spacing < 2 || self.reg_levels == 0 {
            return Err(Error::Config("registration spacing must be >= 2 and levels >= 1".into()));
        }
        self.fusion().validate()?;
        if matches!(self.deconv.0, DeconvMode::Simulated | DeconvMode::Real | DeconvMode::Custom) {
            self.deconv_params().validate()?;
        }
        if self.deconv.0 == DeconvMode::NonBlind {
            disc_psf(self.disc_radius)?;
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    /// File written by the stage, relative to the output directory.
    pub output: Option<String>,
    pub details: Value,
}

/// Images produced by [`restore_frames`].
#[derive(Debug, Clone)]
pub struct Restoration {
    pub reference: Image,
    pub enhanced_reference: Image,
    pub fused: Image,
    pub restored: Image,
    pub log: Vec<StageRecord>,
}

struct Sink {
    dir: Option<PathBuf>,
    log: Vec<StageRecord>,
}

impl Sink {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
            let log = d.join("run_log.jsonl");
            if log.exists() {
                fs::remove_file(&log)?;
            }
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            log: Vec::new(),
        })
    }

    fn record(&mut self, stage: &str, start: Instant, image: Option<(&str, &Image)>, details: Value) -> Result<()> {
        let seconds = start.elapsed().as_secs_f64();
        if let (Some(dir), Some((name, img))) = (&self.dir, image) {
            write_png16(&dir.join(name), img)?;
        }
        let rec = StageRecord {
            stage: stage.to_string(),
            seconds,
            output: image.map(|(n, _)| n.to_string()),
            details,
        };
        info!("stage {stage} finished in {seconds:.2}s");
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("run_log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.log.push(rec);
        Ok(())
    }
}

/// Runs the full restoration on in-memory frames. With `out`, every stage
/// image and the run log are written there as the stages complete.
pub fn restore_frames(frames: &[Image], cfg: &PipelineConfig, out: Option<&Path>) -> Result<Restoration> {
    if frames.len() < 2 {
        return Err(Error::Usage(format!("restore needs at least 2 frames, got {}", frames.len())));
    }
    let (w, h) = frames[0].shape();
    for f in frames {
        if f.shape() != (w, h) {
            return Err(Error::Usage(format!("frames have mixed sizes {:?} and {:?}", (w, h), f.shape())));
        }
    }
    cfg.validate()?;
    let mut sink = Sink::new(out)?;
    if let Some(dir) = out {
        write_atomic(&dir.join("config_used.txt"), cfg.to_key_values().as_bytes())?;
    }
    let rpca_opts = RpcaOptions {
        lambda: None,
        tol: cfg.rpca_tol,
        max_iter: cfg.rpca_max_iter,
    };
    let vcfg = cfg.variational();

    let t = Instant::now();
    let dec = rpca_decompose(&frames_to_matrix(frames)?, &rpca_opts)?;
    let reference = reference_from_lowrank(&dec.low_rank, w, h)?;
    sink.record(
        "rpca",
        t,
        Some(("reference.png", &reference)),
        json!({
            "iterations": dec.iterations,
            "converged": dec.converged,
            "primal_residual": dec.primal_residual,
            "objective": dec.objective_history.last(),
        }),
    )?;

    let mut current: Vec<Image> = frames.to_vec();
    let mut u = reference.clone();
    let mut enhancement = None;
    for o in 0..cfg.out_loop {
        let t = Instant::now();
        let enh = enhance_reference(&current, &u, &vcfg)?;
        let last = o + 1 == cfg.out_loop;
        sink.record(
            "enhance",
            t,
            last.then_some(("enhanced_reference.png", &enh.reference)),
            json!({ "out_iteration": o, "residuals": enh.residuals }),
        )?;
        if !last {
            let t = Instant::now();
            current = enh.registered.clone();
            let dec = rpca_decompose(&frames_to_matrix(&current)?, &rpca_opts)?;
            u = reference_from_lowrank(&dec.low_rank, w, h)?;
            sink.record(
                "rpca",
                t,
                None,
                json!({ "iterations": dec.iterations, "converged": dec.converged, "primal_residual": dec.primal_residual }),
            )?;
        }
        enhancement = Some(enh);
    }
    let enh = enhancement.expect("out_loop >= 1");

    let t = Instant::now();
    let fused = fuse(&enh.registered, &enh.pull_back, &cfg.fusion())?;
    if let Some(dir) = out {
        let mut buf = Vec::new();
        write_index_map(&fused.k_star, w, h, &mut buf)?;
        write_atomic(&dir.join("k_star.u16"), &buf)?;
    }
    sink.record(
        "fuse",
        t,
        Some(("fused_Z.png", &fused.z)),
        json!({ "corrected_fraction": fused.corrected_fraction }),
    )?;

    let t = Instant::now();
    let (restored, details) = match cfg.deconv.0 {
        DeconvMode::Off => (fused.z.clone(), json!({ "mode": "off" })),
        DeconvMode::NonBlind => {
            let l = non_blind_deconvolve(&fused.z, &disc_psf(cfg.disc_radius)?, &cfg.deconv_params())?;
            (l, json!({ "mode": "nonblind", "disc_radius": cfg.disc_radius }))
        }
        mode => {
            let r = blind_deconvolve(&fused.z, &cfg.deconv_params())?;
            let details = json!({
                "mode": mode.name(),
                "energy": r.energy,
                "rejected_kernel_steps": r.rejected_kernel_steps,
                "flagged": r.flagged,
                "psf_center_weight": r.psf.center_weight(),
                "psf": { "width": r.psf.width(), "height": r.psf.height(), "data": r.psf.data() },
            });
            (r.latent, details)
        }
    };
    let restored = restored.clamp_unit();
    sink.record("deconv", t, Some(("restored_L.png", &restored)), details)?;

    Ok(Restoration {
        reference,
        enhanced_reference: enh.reference,
        fused: fused.z,
        restored,
        log: sink.log,
    })
}

/// Reads a frame directory and restores it into `out`.
pub fn restore(input: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Restoration> {
    let frames = read_frames(input)?;
    restore_frames(&frames, cfg, Some(out))
}

/// Degrades `truth` and writes `frame_NNNN.png`, `manifest.txt` and, when
/// `write_fields` is set, `fields/frame_NNNN.field` raw displacement files.
pub fn simulate(truth: &Image, cfg: &TurbulenceConfig, out: &Path, write_fields: bool) -> Result<Vec<Image>> {
    let (frames, fields) = degrade(truth, cfg)?;
    fs::create_dir_all(out)?;
    for (k, f) in frames.iter().enumerate() {
        write_png16(&out.join(frame_name(k)), f)?;
    }
    if write_fields {
        let dir = out.join("fields");
        fs::create_dir_all(&dir)?;
        for (k, field) in fields.iter().enumerate() {
            let mut buf = Vec::new();
            field.write_raw(&mut buf)?;
            write_atomic(&dir.join(format!("frame_{k:04}.field")), &buf)?;
        }
    }
    write_atomic(&out.join("manifest.txt"), cfg.manifest().as_bytes())?;
    Ok(frames)
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl Evaluation {
    pub const CSV_HEADER: &'static str = "name,psnr,ssim";

    pub fn csv_row(&self) -> String {
        let p = if self.psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.4}", self.psnr)
        };
        format!("{},{},{:.6}", self.name, p, self.ssim)
    }
}

/// PSNR (peak 1, images on `[0, 1]`) and SSIM of `restored` against `truth`.
pub fn evaluate_images(name: &str, restored: &Image, truth: &Image) -> Result<Evaluation> {
    Ok(Evaluation {
        name: name.to_string(),
        psnr: psnr(restored, truth, 1.0)?,
        ssim: ssim(restored, truth)?,
    })
}

pub fn evaluate(restored: &Path, truth: &Path) -> Result<Evaluation> {
    let name = restored
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| restored.display().to_string());
    evaluate_images(&name, &read_gray(restored)?, &read_gray(truth)?)
}

/// Timing comparison of the two mixed-ROF solvers.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub size: usize,
    pub trials: usize,
    pub iterations: usize,
    pub fast_seconds: f64,
    pub split_bregman_seconds: f64,
    /// `fast / split_bregman`.
    pub ratio: f64,
    /// `100·(1 − ratio)`.
    pub reduction_percent: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "size={} trials={} iterations={} fast_mean_s={:.4} split_bregman_mean_s={:.4} ratio={:.4} reduction={:.2}%",
            self.size,
            self.trials,
            self.iterations,
            self.fast_seconds,
            self.split_bregman_seconds,
            self.ratio,
            self.reduction_percent
        )
    }
}

/// Random admissible problem: a smooth scene plus noise, anchored at a
/// slightly shifted copy, with the NLTV graph of the noisy image.
pub fn bench_problem(size: usize, seed: u64) -> Result<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(4.0..12.0), rng.random_range(4.0..12.0));
    let clean = Image::from_fn(size, size, |i, j| 0.5 + 0.3 * (i as f64 / a).sin() * (j as f64 / b).cos());
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.05..0.05)).collect();
    let v = Image::new(size, size, clean.data().iter().zip(&noise).map(|(c, n)| c + n).collect())?;
    let u_p = Image::from_fn(size, size, |i, j| clean.get_clamped(i as isize, j as isize - 1));
    Ok((v, u_p))
}

/// Times both solvers on `trials` random problems, each run for exactly
/// `iterations` iterations (tolerance disabled) so the stopping rule is
/// matched.
pub fn bench_solvers(size: usize, trials: usize, iterations: usize, seed: u64) -> Result<BenchReport> {
    if size < 8 || trials == 0 || iterations == 0 {
        return Err(Error::Usage("bench needs size >= 8, trials >= 1, iterations >= 1".into()));
    }
    let params = RofParams::default();
    let opts = SolveOptions {
        max_iter: iterations,
        tol: 0.0,
    };
    let cg = CgOptions::default();
    let (mut fast, mut sb) = (0.0, 0.0);
    for t in 0..trials {
        let (v, u_p) = bench_problem(size, seed.wrapping_add(t as u64))?;
        let graph = build_graph(&v, &GraphParams::default())?;
        let p = MixedRofProblem::new(v, u_p, &graph, params)?;
        let start = Instant::now();
        solve_fast(&p, &opts)?;
        fast += start.elapsed().as_secs_f64();
        let start = Instant::now();
        solve_split_bregman(&p, &opts, &cg)?;
        sb += start.elapsed().as_secs_f64();
    }
    let n = trials as f64;
    let ratio = fast / sb;
    Ok(BenchReport {
        size,
        trials,
        iterations,
        fast_seconds: fast / n,
        split_bregman_seconds: sb / n,
        ratio,
        reduction_percent: 100.0 * (1.0 - ratio),
    })
}
