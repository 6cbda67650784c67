use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::resample::{resize, warp};
use super::ThermalImage;
use crate::error::{Error, Result};
use crate::nn::INPUT_SIDE;

/// Random-magnitude bounds for each augmentation. All magnitudes at zero is
/// the identity (after the resize to the network input size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Maximum shift as a fraction of the side, in `[0, 0.3]`.
    pub translate_max_frac: f64,
    pub flip_prob: f64,
    /// Gaussian blur sigma range in pixels.
    pub blur_sigma_range: (f64, f64),
    /// Per-channel gain is drawn from `1 +/- jitter_strength`.
    pub jitter_strength: f64,
    pub drop_color_prob: f64,
    pub rotate_max_deg: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            translate_max_frac: 0.1,
            flip_prob: 0.5,
            blur_sigma_range: (0.0, 1.5),
            jitter_strength: 0.2,
            drop_color_prob: 0.2,
            rotate_max_deg: 15.0,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            translate_max_frac: 0.0,
            flip_prob: 0.0,
            blur_sigma_range: (0.0, 0.0),
            jitter_strength: 0.0,
            drop_color_prob: 0.0,
            rotate_max_deg: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if !(0.0..=0.3).contains(&self.translate_max_frac) {
            return Err(Error::validation(format!(
                "translate_max_frac must lie in [0, 0.3], got {}",
                self.translate_max_frac
            )));
        }
        unit(self.flip_prob, "flip_prob")?;
        unit(self.drop_color_prob, "drop_color_prob")?;
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::validation(format!("invalid blur sigma range ({lo}, {hi})")));
        }
        if !(self.jitter_strength >= 0.0 && self.rotate_max_deg >= 0.0) {
            return Err(Error::validation("jitter and rotation magnitudes must be >= 0"));
        }
        Ok(())
    }

    /// Fresh generator seeded from the policy.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Two independently augmented network-sized views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v1: Array3<f32>,
    pub v2: Array3<f32>,
    pub source_id: String,
}

struct Draw {
    dx: f64,
    dy: f64,
    flip: bool,
    sigma: f64,
    gains: [f32; 3],
    drop: bool,
    angle: f64,
}

impl Draw {
    // Every draw consumes the same number of variates, whatever the policy.
    fn sample<R: Rng + ?Sized>(p: &AugmentPolicy, rng: &mut R) -> Self {
        let mut sym = |m: f64| (rng.random::<f64>() * 2.0 - 1.0) * m;
        let side = INPUT_SIDE as f64;
        let dx = sym(p.translate_max_frac * side);
        let dy = sym(p.translate_max_frac * side);
        let flip = rng.random::<f64>() < p.flip_prob;
        let (lo, hi) = p.blur_sigma_range;
        let sigma = lo + rng.random::<f64>() * (hi - lo);
        let mut gains = [1f32; 3];
        for g in &mut gains {
            *g = (1.0 + (rng.random::<f64>() * 2.0 - 1.0) * p.jitter_strength) as f32;
        }
        let drop = rng.random::<f64>() < p.drop_color_prob;
        let angle = (rng.random::<f64>() * 2.0 - 1.0) * p.rotate_max_deg;
        Self {
            dx,
            dy,
            flip,
            sigma,
            gains,
            drop,
            angle,
        }
    }
}

fn gaussian_blur(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / s) as f32).collect()
    };
    let (h, w, c) = img.dim();
    let k = kernel.len();
    let r = radius as usize;
    let src = img.as_standard_layout();
    let src = src.as_slice().unwrap();
    let stride = w * c;
    let mut tmp = vec![0f32; h * stride];
    // Horizontal pass over an edge-replicated copy of each row.
    let mut padded = vec![0f32; (w + 2 * r) * c];
    for y in 0..h {
        let row = &src[y * stride..(y + 1) * stride];
        for x in 0..w + 2 * r {
            let sx = (x as isize - radius).clamp(0, w as isize - 1) as usize;
            padded[x * c..(x + 1) * c].copy_from_slice(&row[sx * c..(sx + 1) * c]);
        }
        let dst = &mut tmp[y * stride..(y + 1) * stride];
        for (t, wt) in kernel.iter().enumerate() {
            dst.iter_mut().zip(&padded[t * c..t * c + stride]).for_each(|(d, s)| *d += wt * s);
        }
    }
    let mut out = vec![0f32; h * stride];
    for y in 0..h {
        let dst = &mut out[y * stride..(y + 1) * stride];
        for (t, wt) in kernel.iter().enumerate() {
            let yy = (y as isize + t as isize - radius).clamp(0, h as isize - 1) as usize;
            let srow = &tmp[yy * stride..(yy + 1) * stride];
            dst.iter_mut().zip(srow).for_each(|(d, s)| *d += wt * s);
        }
    }
    debug_assert_eq!(k, 2 * r + 1);
    Array3::from_shape_vec((h, w, c), out).unwrap()
}

/// Resize to `224 x 224 x 3`, then translate, flip, blur, jitter, drop colour
/// and rotate with magnitudes drawn from `rng` inside the policy bounds.
pub fn augment_view<R: Rng + ?Sized>(
    img: &ThermalImage,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Array3<f32> {
    let d = Draw::sample(policy, rng);
    let side = INPUT_SIDE;
    let mut v = resize(&img.pixels, side, side);

    if d.dx != 0.0 || d.dy != 0.0 {
        v = warp(&v, side, side, |y, x| (y - d.dy, x - d.dx));
    }
    if d.flip {
        let px = v.as_slice_mut().unwrap();
        for row in px.chunks_exact_mut(side * 3) {
            for x in 0..side / 2 {
                for ch in 0..3 {
                    row.swap(x * 3 + ch, (side - 1 - x) * 3 + ch);
                }
            }
        }
    }
    if d.sigma > 1e-6 {
        v = gaussian_blur(&v, d.sigma);
    }
    if d.gains != [1.0; 3] {
        for px in v.as_slice_mut().unwrap().chunks_exact_mut(3) {
            px.iter_mut().zip(d.gains).for_each(|(p, g)| *p *= g);
        }
    }
    if d.drop {
        for px in v.as_slice_mut().unwrap().chunks_exact_mut(3) {
            let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(g);
        }
    }
    if d.angle != 0.0 {
        let (s, c) = d.angle.to_radians().sin_cos();
        let centre = (side as f64 - 1.0) / 2.0;
        v = warp(&v, side, side, |y, x| {
            let (yy, xx) = (y - centre, x - centre);
            (c * yy - s * xx + centre, s * yy + c * xx + centre)
        });
    }
    v.mapv_inplace(|p| p.clamp(0.0, 1.0));
    v
}

pub fn make_view_pair<R: Rng + ?Sized>(
    img: &ThermalImage,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> ViewPair {
    let v1 = augment_view(img, policy, rng);
    let v2 = augment_view(img, policy, rng);
    ViewPair {
        v1,
        v2,
        source_id: img.id.clone(),
    }
}
