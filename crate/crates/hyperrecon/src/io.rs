//! Files: checkpoints, images, raw tensors and tabular exports.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hyperrecon_core::checkpoint::{decode_records, encode_records, Checkpoint};
use hyperrecon_core::data::prepare_image;
use hyperrecon_core::evaluation::{Curve, Landscape};
use hyperrecon_core::numerics::NdArray;
use hyperrecon_core::Real;
use image::{GrayImage, ImageFormat, Luma};

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Writes through a sibling temporary file so a crash never leaves a torn
/// file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

/// Grayscale pixels of a PNG or PGM file in `[0, 1]`, row-major, with
/// height and width.
pub fn read_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    let px = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Ok((px, h as usize, w as usize))
}

/// Every PNG/PGM in `dir` (sorted by name), center-cropped, resized to
/// `size` and normalized. Flat images are skipped with a warning.
pub fn import_images(dir: &Path, size: usize) -> Result<Vec<NdArray<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let (px, h, w) = read_gray(p)?;
        let (img, flat) = prepare_image(&px, h, w, size)?;
        if flat {
            eprintln!("warning: skipping constant image {}", p.display());
            continue;
        }
        out.push(img);
    }
    if out.is_empty() {
        bail!("no usable PNG or PGM images in {}", dir.display());
    }
    Ok(out)
}

/// 8-bit grayscale of an `[H, W]` image, clamped to `[0, 1]`.
pub fn to_gray8<T: Real>(x: &NdArray<T>) -> Result<GrayImage> {
    let &[h, w] = x.shape() else {
        bail!("expected an [H, W] image, got shape {:?}", x.shape());
    };
    let mut g = GrayImage::new(w as u32, h as u32);
    for (i, v) in x.data().iter().enumerate() {
        let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
        g.put_pixel((i % w) as u32, (i / w) as u32, Luma([(v * 255.0).round() as u8]));
    }
    Ok(g)
}

pub fn png_bytes<T: Real>(x: &NdArray<T>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_gray8(x)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png<T: Real>(path: &Path, x: &NdArray<T>) -> Result<()> {
    write_atomic(path, &png_bytes(x)?)
}

/// Full-precision sidecar in the checkpoint record layout.
pub fn write_raw(path: &Path, tensors: &[(&str, &NdArray<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    encode_records(&mut out, tensors.iter().copied())?;
    write_atomic(path, &out)
}

pub fn read_raw(path: &Path) -> Result<Vec<(String, NdArray<f32>)>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_records(&bytes)?)
}

pub fn curve_csv(c: &Curve) -> String {
    let mut s = format!("lambda,{}\n", c.metric.name());
    for (l, v) in c.axis.iter().zip(&c.values) {
        s.push_str(&format!("{l},{v}\n"));
    }
    s
}

/// One row per grid point: `lambda1,lambda2,value`.
pub fn landscape_csv(l: &Landscape) -> String {
    let mut s = format!("lambda1,lambda2,{}\n", l.metric.name());
    for (i, row) in l.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s.push_str(&format!("{},{},{v}\n", l.x_axis[j], l.y_axis[i]));
        }
    }
    s
}

/// Appends one JSON line.
pub fn append_ndjson<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}
