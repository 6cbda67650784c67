//! Class-activation heatmaps and their conversion into hotspot regions.

use std::collections::VecDeque;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3, Ix4};
use serde::{Deserialize, Serialize};

use crate::data::resample::{resize, resize_plane};
use crate::data::ThermalImage;
use crate::detect::Classifier;
use crate::error::{Error, Result};
use crate::nn::{images_to_batch, Mode, Module, Tensor, INPUT_SIDE};

/// Attention map normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f32>,
    pub source_image_id: String,
    pub class_index: usize,
}

/// Channel-weighted final feature maps for one `[1, C, H, W]` input,
/// upsampled to `out_h x out_w` and divided by their maximum.
pub fn gradcam_tensor(c: &mut Classifier, x: &Tensor, class_index: usize, out_h: usize, out_w: usize) -> Result<Array2<f32>> {
    if class_index > 1 {
        return Err(Error::validation(format!("class index must be 0 or 1, got {class_index}")));
    }
    if !c.backbone.pooled {
        return Err(Error::validation("heatmaps need a convolutional backbone"));
    }
    if x.ndim() != 4 || x.shape()[0] != 1 {
        return Err(Error::validation(format!("expected a single [1, C, H, W] input, got {:?}", x.shape())));
    }
    let maps = c.backbone.feature_maps(x, Mode::Infer)?;
    let pooled = c.backbone.pool.forward(&maps)?;
    let logits = c.head.forward(&pooled)?;
    let mut seed = Tensor::zeros(logits.raw_dim());
    seed[[0, class_index]] = 1.0;
    let grad_maps = c.backbone.pool.backward(&c.head.backward(&seed));
    c.zero_grad();
    c.clear_cache();

    let a = maps.into_dimensionality::<Ix4>().expect("rank-4 maps");
    let g = grad_maps.into_dimensionality::<Ix4>().expect("rank-4 gradient");
    let (_, k, h, w) = a.dim();
    let mut raw = Array2::<f32>::zeros((h, w));
    for ch in 0..k {
        let alpha = g.slice(ndarray::s![0, ch, .., ..]).mean().unwrap_or(0.0);
        raw.scaled_add(alpha / k as f32, &a.slice(ndarray::s![0, ch, .., ..]));
    }
    raw.mapv_inplace(|v| v.max(0.0));
    let mut up = resize_plane(&raw, out_h, out_w);
    let max = up.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        up.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    Ok(up)
}

/// Heatmap at the image's own resolution.
pub fn gradcam_heatmap(c: &mut Classifier, img: &ThermalImage, class_index: usize) -> Result<Heatmap> {
    let input = resize(&img.pixels, INPUT_SIDE, INPUT_SIDE);
    let x = images_to_batch(&[&input])?;
    let values = gradcam_tensor(c, &x, class_index, img.height(), img.width())?;
    Ok(Heatmap {
        values,
        source_image_id: img.id.clone(),
        class_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Inclusive `(top, left, bottom, right)`.
    pub bbox: (usize, usize, usize, usize),
    /// `(row, column)` mean of member pixels.
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotspotRegion {
    pub mask: Array2<bool>,
    /// Sorted by area, largest first.
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolateConfig {
    pub threshold: f32,
    pub min_area: usize,
}

impl Default for IsolateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area: 20,
        }
    }
}

/// 8-connected components of `mask`, each as its member pixel list, in scan order.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                pixels.push((cy, cx));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(pixels);
        }
    }
    out
}

pub fn isolate_hotspots(h: &Heatmap, cfg: &IsolateConfig) -> HotspotRegion {
    let raw = h.values.mapv(|v| v >= cfg.threshold);
    let mut mask = Array2::from_elem(raw.raw_dim(), false);
    let mut components = Vec::new();
    for pixels in connected_components(&raw) {
        if pixels.len() < cfg.min_area {
            continue;
        }
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        let (mut sy, mut sx) = (0.0, 0.0);
        for &(y, x) in &pixels {
            mask[[y, x]] = true;
            top = top.min(y);
            left = left.min(x);
            bottom = bottom.max(y);
            right = right.max(x);
            sy += y as f64;
            sx += x as f64;
        }
        let n = pixels.len() as f64;
        components.push(Component {
            bbox: (top, left, bottom, right),
            centroid: (sy / n, sx / n),
            area: pixels.len(),
        });
    }
    components.sort_by(|a, b| b.area.cmp(&a.area));
    HotspotRegion { mask, components }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Input, grey heatmap and input with the mask tinted red, side by side.
pub fn compose_overlay(img: &ThermalImage, h: &Heatmap, region: &HotspotRegion) -> Result<RgbImage> {
    let (ih, iw) = (img.height(), img.width());
    if h.values.dim() != (ih, iw) || region.mask.dim() != (ih, iw) {
        return Err(Error::validation(format!(
            "overlay inputs disagree: image {:?}, heatmap {:?}, mask {:?}",
            (ih, iw),
            h.values.dim(),
            region.mask.dim()
        )));
    }
    let px: &Array3<f32> = &img.pixels;
    let mut out = RgbImage::new(3 * iw as u32, ih as u32);
    for y in 0..ih {
        for x in 0..iw {
            let rgb = [to_u8(px[[y, x, 0]]), to_u8(px[[y, x, 1]]), to_u8(px[[y, x, 2]])];
            out.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            let g = to_u8(h.values[[y, x]]);
            out.put_pixel((iw + x) as u32, y as u32, image::Rgb([g, g, g]));
            let tinted = if region.mask[[y, x]] {
                [
                    to_u8(0.5 * px[[y, x, 0]] + 0.5),
                    to_u8(0.5 * px[[y, x, 1]]),
                    to_u8(0.5 * px[[y, x, 2]]),
                ]
            } else {
                rgb
            };
            out.put_pixel((2 * iw + x) as u32, y as u32, image::Rgb(tinted));
        }
    }
    Ok(out)
}

pub fn render_overlay(img: &ThermalImage, h: &Heatmap, region: &HotspotRegion, path: &Path) -> Result<RgbImage> {
    let composite = compose_overlay(img, h, region)?;
    composite.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(composite)
}

pub fn write_heatmap_png(h: &Heatmap, path: &Path) -> Result<()> {
    let (rows, cols) = h.values.dim();
    let img = image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        image::Luma([to_u8(h.values[[y as usize, x as usize]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
