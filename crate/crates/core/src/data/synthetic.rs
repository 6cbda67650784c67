//! Seeded generator for thermal-style images of shaped metal plates with
//! heated regions, with exact ground-truth hotspot masks.
//!
//! Geometry is evaluated at pixel centres `(x + 0.5, y + 0.5)`. A pixel
//! belongs to a hotspot when it lies on the plate and some blob contributes
//! at least half of its peak there.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, ThermalImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateShape {
    Rectangle,
    Triangle,
    Oval,
    Rhombus,
}

impl std::str::FromStr for PlateShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(Self::Rectangle),
            "triangle" => Ok(Self::Triangle),
            "oval" => Ok(Self::Oval),
            "rhombus" => Ok(Self::Rhombus),
            other => Err(Error::validation(format!("unknown plate shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub shapes: Vec<PlateShape>,
    pub hotspots_per_anomalous: Vec<usize>,
    pub anomalous_fraction: f64,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Standard deviation of additive sensor noise on the temperature field.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_noise() -> f64 {
    0.01
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            shapes: vec![
                PlateShape::Rectangle,
                PlateShape::Triangle,
                PlateShape::Oval,
                PlateShape::Rhombus,
            ],
            hotspots_per_anomalous: vec![1, 2, 3],
            anomalous_fraction: 0.5,
            image_size: (224, 224),
            seed: 0,
            noise_std: default_noise(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 1 {
            return Err(Error::validation("n_images must be at least 1"));
        }
        if self.shapes.is_empty() {
            return Err(Error::validation("shapes must not be empty"));
        }
        if self.hotspots_per_anomalous.is_empty()
            || self.hotspots_per_anomalous.iter().any(|k| !(1..=3).contains(k))
        {
            return Err(Error::validation(
                "hotspots_per_anomalous must be a non-empty subset of {1, 2, 3}",
            ));
        }
        if !(0.0..=1.0).contains(&self.anomalous_fraction) {
            return Err(Error::validation("anomalous_fraction must lie in [0, 1]"));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::validation("image_size must be at least 16 x 16"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn anomalous_count(&self) -> usize {
        (self.n_images as f64 * self.anomalous_fraction).round() as usize
    }
}

/// Plate placement in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateGeometry {
    pub shape: PlateShape,
    pub cx: f64,
    pub cy: f64,
    /// Half extents along the plate's local axes.
    pub half_w: f64,
    pub half_h: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl PlateGeometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = (self.half_w, self.half_h);
        match self.shape {
            PlateShape::Rectangle => u.abs() <= a && v.abs() <= b,
            PlateShape::Oval => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            PlateShape::Rhombus => u.abs() / a + v.abs() / b <= 1.0,
            PlateShape::Triangle => v <= b && u.abs() <= a * (v + b) / (2.0 * b),
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

/// One heated region: `amplitude * exp(-d^2 / (2 sigma^2))` on the plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Blob {
    /// Radius of the half-peak level set.
    pub fn half_max_radius(&self) -> f64 {
        self.sigma * (2.0 * std::f64::consts::LN_2).sqrt()
    }

    fn within_half_max(&self, x: f64, y: f64) -> bool {
        let r = self.half_max_radius();
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= r * r
    }
}

/// Everything needed to re-render an image's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub label: Label,
    pub plate: PlateGeometry,
    pub background: f64,
    pub plate_temperature: f64,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: ThermalImage,
    pub record: SyntheticRecord,
}

/// Ground-truth mask of a record's blobs clipped to its plate.
pub fn render_blob_mask(record: &SyntheticRecord, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        record.plate.contains(px, py) && record.blobs.iter().any(|b| b.within_half_max(px, py))
    })
}

/// Monotone-luminance "iron" palette: black, violet, red, orange, pale yellow.
pub fn thermal_palette(t: f32) -> [f32; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.0]),
        (0.25, [0.30, 0.0, 0.50]),
        (0.5, [0.80, 0.10, 0.30]),
        (0.75, [1.0, 0.60, 0.0]),
        (1.0, [1.0, 1.0, 0.80]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [
                c0[0] + (c1[0] - c0[0]) * f,
                c0[1] + (c1[1] - c0[1]) * f,
                c0[2] + (c1[2] - c0[2]) * f,
            ];
        }
    }
    STOPS[4].1
}

fn place_plate<R: Rng + ?Sized>(shape: PlateShape, h: usize, w: usize, rng: &mut R) -> PlateGeometry {
    let side = h.min(w) as f64;
    let half_w = side * rng.random_range(0.26..0.36);
    let aspect = match shape {
        PlateShape::Rectangle => rng.random_range(0.55..0.75),
        PlateShape::Oval => rng.random_range(0.75..0.9),
        PlateShape::Rhombus => rng.random_range(0.8..1.0),
        PlateShape::Triangle => rng.random_range(1.0..1.3),
    };
    PlateGeometry {
        shape,
        cx: w as f64 / 2.0 + side * rng.random_range(-0.06..0.06),
        cy: h as f64 / 2.0 + side * rng.random_range(-0.06..0.06),
        half_w,
        half_h: (half_w * aspect).min(side * 0.42),
        angle: rng.random_range(-0.35..0.35),
    }
}

fn place_blob<R: Rng + ?Sized>(plate: &PlateGeometry, side: f64, rng: &mut R) -> Blob {
    let mut sigma = side * rng.random_range(0.028..0.05);
    let amplitude = rng.random_range(0.35..0.5);
    let reach = plate.half_w.max(plate.half_h);
    loop {
        for _ in 0..200 {
            let cx = plate.cx + rng.random_range(-reach..reach);
            let cy = plate.cy + rng.random_range(-reach..reach);
            let blob = Blob {
                cx,
                cy,
                sigma,
                amplitude,
            };
            // Keep the half-peak disc, plus a pixel of margin, on the plate.
            let r = blob.half_max_radius() + 1.0;
            let inside = plate.contains(cx, cy)
                && (0..24).all(|k| {
                    let t = k as f64 * std::f64::consts::TAU / 24.0;
                    plate.contains(cx + r * t.cos(), cy + r * t.sin())
                });
            if inside {
                return blob;
            }
        }
        sigma *= 0.8;
    }
}

fn render(cfg: &SyntheticConfig, idx: usize, anomalous: bool) -> SyntheticSample {
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64 + 1);

    let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let plate = place_plate(shape, h, w, &mut rng);
    let background = rng.random_range(0.04..0.10);
    let plate_temperature = rng.random_range(0.30..0.42);
    let gradient = rng.random_range(-0.03..0.03);
    let blobs: Vec<Blob> = if anomalous {
        let k = cfg.hotspots_per_anomalous[rng.random_range(0..cfg.hotspots_per_anomalous.len())];
        (0..k).map(|_| place_blob(&plate, h.min(w) as f64, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise");

    let (s, c) = plate.angle.sin_cos();
    let mut pixels = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = background + noise.sample(&mut rng);
            if plate.contains(px, py) {
                let u = c * (px - plate.cx) + s * (py - plate.cy);
                t += plate_temperature + gradient * u / plate.half_w;
                for b in &blobs {
                    let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                    t += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
            }
            let rgb = thermal_palette(t as f32);
            for ch in 0..3 {
                pixels[[y, x, ch]] = rgb[ch];
            }
        }
    }

    let label = if anomalous {
        Label::Anomalous
    } else {
        Label::Normal
    };
    let record = SyntheticRecord {
        id: format!("syn_{idx:05}"),
        label,
        plate,
        background,
        plate_temperature,
        blobs,
    };
    let mask = render_blob_mask(&record, h, w);
    let image = ThermalImage::new(record.id.clone(), pixels, Some(label), Some(mask))
        .expect("generator honours image invariants");
    SyntheticSample { image, record }
}

/// Generates the dataset together with per-image ground-truth records.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut anomalous = vec![false; cfg.n_images];
    for &i in &order[..cfg.anomalous_count()] {
        anomalous[i] = true;
    }
    Ok((0..cfg.n_images).map(|i| render(cfg, i, anomalous[i])).collect())
}

pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<ThermalImage>> {
    Ok(generate_synthetic(cfg)?.into_iter().map(|s| s.image).collect())
}
