//! Thermal image container, dataset ingestion, synthetic data and view augmentation.

mod augment;
mod dataset;
pub mod resample;
mod synthetic;

pub use augment::{augment_view, make_view_pair, AugmentPolicy, ViewPair};
pub use dataset::{
    load_dataset, load_manifest_labels, read_mask_png, read_rgb_png, write_dataset, write_mask_png,
    write_rgb_png, MANIFEST_FILE,
};
pub use synthetic::{
    generate_synthetic, generate_synthetic_dataset, render_blob_mask, thermal_palette, Blob,
    PlateGeometry, PlateShape, SyntheticConfig, SyntheticRecord, SyntheticSample,
};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal = 0,
    Anomalous = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            _ => Err(Error::validation(format!("label must be 0 or 1, got {i}"))),
        }
    }
}

/// An `H x W x 3` raster with intensities in `[0, 1]`, plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    pub id: String,
    pub pixels: Array3<f32>,
    pub label: Option<Label>,
    pub mask: Option<Array2<bool>>,
}

impl ThermalImage {
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<f32>,
        label: Option<Label>,
        mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "image {id}: expected H x W x 3 pixels, got {:?}",
                pixels.dim()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "image {id}: pixel value {bad} outside [0, 1]"
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::validation(format!(
                    "image {id}: mask {:?} does not match pixels {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
            if label == Some(Label::Normal) && m.iter().any(|&b| b) {
                return Err(Error::validation(format!(
                    "image {id}: normal image carries a non-empty hotspot mask"
                )));
            }
        }
        Ok(Self {
            id,
            pixels,
            label,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Rec. 601 luma, in `[0, 1]`.
    pub fn luma(&self) -> Array2<f32> {
        luma(&self.pixels)
    }
}

pub fn luma(pixels: &Array3<f32>) -> Array2<f32> {
    let (h, w, _) = pixels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * pixels[[y, x, 0]] + 0.587 * pixels[[y, x, 1]] + 0.114 * pixels[[y, x, 2]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_enforced() {
        let px = Array3::from_elem((4, 5, 3), 0.5f32);
        assert!(ThermalImage::new("a", px.clone(), None, None).is_ok());
        let mut bad = px.clone();
        bad[[0, 0, 0]] = 1.5;
        assert!(ThermalImage::new("a", bad, None, None).is_err());
        assert!(ThermalImage::new("a", px.clone(), None, Some(Array2::from_elem((5, 4), false))).is_err());
        let mut m = Array2::from_elem((4, 5), false);
        m[[1, 1]] = true;
        assert!(ThermalImage::new("a", px.clone(), Some(Label::Normal), Some(m.clone())).is_err());
        assert!(ThermalImage::new("a", px, Some(Label::Anomalous), Some(m)).is_ok());
    }

    #[test]
    fn label_indices() {
        assert_eq!(Label::from_index(1).unwrap(), Label::Anomalous);
        assert!(Label::from_index(2).is_err());
    }
}
