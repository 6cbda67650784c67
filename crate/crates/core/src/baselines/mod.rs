//! Classical hotspot segmenters used as comparison points for the heatmaps.

mod color;
mod kmeans;
mod otsu;

pub use color::{rgb_to_hsv, srgb_to_lab};
pub use kmeans::{assign, kmeans, kmeans_pp_init, lloyd, KMeans, MAX_ITERATIONS, TOLERANCE};
pub use otsu::{dilate, erode, histogram, opening, otsu_thresholds, MAX_THRESHOLDS};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{luma, ThermalImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMethod {
    KmeansLab,
    KmeansPv,
    HsvThreshold,
    MultilevelOtsu,
}

impl SegmentationMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::KmeansLab => "kmeans_lab",
            Self::KmeansPv => "kmeans_pv",
            Self::HsvThreshold => "hsv",
            Self::MultilevelOtsu => "otsu",
        }
    }
}

impl std::str::FromStr for SegmentationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans_lab" => Ok(Self::KmeansLab),
            "kmeans_pv" => Ok(Self::KmeansPv),
            "hsv" | "hsv_threshold" => Ok(Self::HsvThreshold),
            "otsu" | "multilevel_otsu" => Ok(Self::MultilevelOtsu),
            other => Err(Error::validation(format!("unknown segmentation method {other:?}"))),
        }
    }
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }
}

/// Hue in degrees, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SegmentationParams {
    KmeansLab { k: usize, seed: u64 },
    KmeansPv { bbox: BBox, k: usize, seed: u64 },
    HsvThreshold { lower: Hsv, upper: Hsv },
    MultilevelOtsu { n_thresholds: usize, opening_radius: usize, thresholds: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub mask: Array2<bool>,
    pub method: SegmentationMethod,
    pub params: SegmentationParams,
}

/// k-means over per-pixel L*a*b* vectors; the cluster with the highest mean
/// L* is the hotspot.
pub fn kmeans_lab_segment(img: &ThermalImage, k: usize, seed: u64) -> Result<SegmentationResult> {
    let (h, w) = (img.height(), img.width());
    let mut pts = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = img.pixels.slice(ndarray::s![y, x, ..]);
            pts.extend(srgb_to_lab([px[0], px[1], px[2]]));
        }
    }
    let km = kmeans(&pts, 3, k, seed)?;
    let hot = (0..k)
        .max_by(|&a, &b| km.centroids[a][0].total_cmp(&km.centroids[b][0]))
        .expect("k >= 2");
    let mask = Array2::from_shape_vec((h, w), km.assignment.iter().map(|&c| c == hot).collect())
        .expect("one label per pixel");
    Ok(SegmentationResult {
        mask,
        method: SegmentationMethod::KmeansLab,
        params: SegmentationParams::KmeansLab { k, seed },
    })
}

/// Fixed cluster count of the intensity-based method.
pub const PV_CLUSTERS: usize = 3;

/// Intensity k-means (k = 3) inside `bbox`; the brightest cluster becomes the
/// mask. Crops with fewer than three distinct intensities use that many clusters.
pub fn kmeans_pv_segment(img: &ThermalImage, bbox: BBox, seed: u64) -> Result<SegmentationResult> {
    let (h, w) = (img.height(), img.width());
    if bbox.height == 0 || bbox.width == 0 {
        return Err(Error::validation("empty bounding box"));
    }
    if bbox.top + bbox.height > h || bbox.left + bbox.width > w {
        return Err(Error::validation(format!("bounding box {bbox:?} exceeds the {h}x{w} image")));
    }
    let gray = img.luma();
    let crop = gray.slice(ndarray::s![bbox.top..bbox.top + bbox.height, bbox.left..bbox.left + bbox.width]);
    let pts: Vec<f64> = crop.iter().map(|&v| v as f64).collect();
    let distinct = kmeans::distinct_points(&pts, 1);
    if distinct < 2 {
        return Err(Error::validation("bounding box content is constant"));
    }
    let k = PV_CLUSTERS.min(distinct);
    let km = kmeans(&pts, 1, k, seed)?;
    let hot = (0..k)
        .max_by(|&a, &b| km.centroids[a][0].total_cmp(&km.centroids[b][0]))
        .expect("k >= 2");
    let mut mask = Array2::from_elem((h, w), false);
    for (i, &c) in km.assignment.iter().enumerate() {
        if c == hot {
            mask[[bbox.top + i / bbox.width, bbox.left + i % bbox.width]] = true;
        }
    }
    Ok(SegmentationResult {
        mask,
        method: SegmentationMethod::KmeansPv,
        params: SegmentationParams::KmeansPv { bbox, k, seed },
    })
}

/// Per-channel HSV range test. A lower hue above the upper hue selects the
/// band that wraps through 0 degrees.
pub fn hsv_threshold_segment(img: &ThermalImage, lower: Hsv, upper: Hsv) -> Result<SegmentationResult> {
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    let hue_ok = |v: f64| (0.0..=360.0).contains(&v);
    if !(hue_ok(lower.h) && hue_ok(upper.h) && in_unit(lower.s) && in_unit(upper.s) && in_unit(lower.v) && in_unit(upper.v)) {
        return Err(Error::validation("HSV bounds out of range (h in [0, 360], s and v in [0, 1])"));
    }
    if lower.s > upper.s || lower.v > upper.v {
        return Err(Error::validation("HSV lower bound exceeds the upper bound"));
    }
    let wraps = lower.h > upper.h;
    let (h, w) = (img.height(), img.width());
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let p = &img.pixels;
        let [hh, s, v] = rgb_to_hsv([p[[y, x, 0]], p[[y, x, 1]], p[[y, x, 2]]]);
        let hue_in = if wraps {
            hh >= lower.h || hh <= upper.h
        } else {
            hh >= lower.h && hh <= upper.h
        };
        hue_in && s >= lower.s && s <= upper.s && v >= lower.v && v <= upper.v
    });
    Ok(SegmentationResult {
        mask,
        method: SegmentationMethod::HsvThreshold,
        params: SegmentationParams::HsvThreshold { lower, upper },
    })
}

pub fn gray_levels(img: &ThermalImage) -> Array2<u8> {
    luma(&img.pixels).mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Binarises above the largest multilevel Otsu threshold, then opens with a disk.
pub fn multilevel_otsu_segment(img: &ThermalImage, n_thresholds: usize, opening_radius: usize) -> Result<SegmentationResult> {
    let gray = gray_levels(img);
    let thresholds = otsu_thresholds(&histogram(&gray), n_thresholds)?;
    let top = *thresholds.iter().max().expect("at least one threshold");
    let mask = opening(&gray.mapv(|g| g > top), opening_radius);
    Ok(SegmentationResult {
        mask,
        method: SegmentationMethod::MultilevelOtsu,
        params: SegmentationParams::MultilevelOtsu {
            n_thresholds,
            opening_radius,
            thresholds,
        },
    })
}

/// `2 |A & B| / (|A| + |B|)`, or 1 when both masks are empty.
pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn dice_compare(result: &SegmentationResult, truth: &Array2<bool>) -> Result<f64> {
    dice(&result.mask, truth)
}
