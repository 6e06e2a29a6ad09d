//! Frame files: PNG and PGM in, 16-bit grayscale PNG out.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{invalid, Error, Result};
use crate::grid::Image;

const FRAME_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Reads an image as luma `0.299R + 0.587G + 0.114B` on `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            img.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        other => other
            .into_rgb32f()
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    };
    Image::new(w, h, data)
}

/// Writes `u` clamped to `[0, 1]` as a 16-bit grayscale PNG. The file is
/// written under a temporary name and renamed, so a crash never leaves a
/// truncated image behind.
pub fn write_png16(path: &Path, u: &Image) -> Result<()> {
    let (w, h) = u.shape();
    let raw: Vec<u16> = u.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| invalid("image buffer size mismatch"))?;
    let tmp = temp_path(path);
    buf.save_with_format(&tmp, image::ImageFormat::Png)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes bytes through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Frame files in `dir` with a known extension, in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Reads every frame of a directory; sizes must agree.
pub fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_frames(dir)?;
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_gray(p)?;
        if let Some(first) = frames.first() {
            let first: &Image = first;
            if first.shape() != f.shape() {
                return Err(Error::Usage(format!(
                    "frame {} is {:?}, expected {:?}",
                    p.display(),
                    f.shape(),
                    first.shape()
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Zero-padded frame file name.
pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let u = Image::from_fn(7, 5, |i, j| (i * 7 + j) as f64 / 34.0);
        let p = dir.path().join("a.png");
        write_png16(&p, &u).unwrap();
        let back = read_gray(&p).unwrap();
        assert!(back.max_abs_diff(&u) <= 0.5 / 65535.0 + 1e-12);
        assert!(!dir.path().join("a.png.partial").exists());
    }

    #[test]
    fn colour_input_uses_luma_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = ImageBuffer::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([255u8, 0, 0]) } else { image::Rgb([0, 0, 255]) });
        img.save(&p).unwrap();
        let g = read_gray(&p).unwrap();
        assert!((g.get(0, 0) - 0.299).abs() < 1e-6);
        assert!((g.get(0, 1) - 0.114).abs() < 1e-6);
    }

    #[test]
    fn listing_is_lexicographic_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let u = Image::filled(4, 4, 0.5);
        for name in ["b.png", "a.png", "c.pgm"] {
            let p = dir.path().join(name);
            if name.ends_with("pgm") {
                image::GrayImage::from_pixel(4, 4, image::Luma([128])).save(&p).unwrap();
            } else {
                write_png16(&p, &u).unwrap();
            }
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<String> = list_frames(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "c.pgm"]);
        assert_eq!(read_frames(dir.path()).unwrap().len(), 3);
        write_png16(&dir.path().join("d.png"), &Image::zeros(3, 3)).unwrap();
        assert!(matches!(read_frames(dir.path()), Err(Error::Usage(_))));
    }
}
