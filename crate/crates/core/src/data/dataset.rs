//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png   8-bit grayscale or RGB
//! <root>/masks/<id>.png    optional, 0/255
//! <root>/manifest.csv      path,label   (label 0, 1 or empty)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::{Label, ThermalImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn write_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            quantize(pixels[[y, x, 0]]),
            quantize(pixels[[y, x, 1]]),
            quantize(pixels[[y, x, 2]]),
        ])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

struct ManifestRow {
    row: usize,
    path: String,
    label: Option<Label>,
}

fn read_manifest(manifest: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest, io),
            other => Error::validation(format!("manifest {}: {other:?}", manifest.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("manifest lacks a {name:?} column")))
    };
    let (pcol, lcol) = (col("path")?, col("label")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let path = rec.get(pcol).unwrap_or("").to_string();
        let label = match rec.get(lcol).unwrap_or("") {
            "" => None,
            "0" => Some(Label::Normal),
            "1" => Some(Label::Anomalous),
            other => {
                return Err(Error::validation(format!(
                    "manifest row {row} ({path}): label must be 0, 1 or empty, got {other:?}"
                )))
            }
        };
        rows.push(ManifestRow { row, path, label });
    }
    Ok(rows)
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// `(id, label)` pairs in manifest order; ids are image file stems.
pub fn load_manifest_labels(manifest: &Path) -> Result<Vec<(String, Option<Label>)>> {
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|r| (stem(&r.path), r.label))
        .collect())
}

/// Loads images (and masks found under `masks/`) in manifest order.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<ThermalImage>> {
    let rows = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let path = root.join(&r.path);
        if !path.is_file() {
            return Err(Error::Ingestion {
                row: r.row,
                path,
                reason: "image file not found".into(),
            });
        }
        let pixels = read_rgb_png(&path).map_err(|e| Error::Ingestion {
            row: r.row,
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let id = stem(&r.path);
        let mask_path = root.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.is_file() {
            Some(read_mask_png(&mask_path)?)
        } else {
            None
        };
        out.push(ThermalImage::new(id, pixels, r.label, mask).map_err(|e| Error::Ingestion {
            row: r.row,
            path,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `images/`, `masks/` (for images carrying one) and `manifest.csv`.
pub fn write_dataset(root: &Path, images: &[ThermalImage]) -> Result<PathBuf> {
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    if images.iter().any(|i| i.mask.is_some()) {
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["path", "label"])?;
    for img in images {
        let rel = format!("images/{}.png", img.id);
        write_rgb_png(&root.join(&rel), &img.pixels)?;
        if let Some(m) = &img.mask {
            write_mask_png(&mask_dir.join(format!("{}.png", img.id)), m)?;
        }
        let label = img.label.map(|l| l.index().to_string()).unwrap_or_default();
        w.write_record([rel, label])?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
