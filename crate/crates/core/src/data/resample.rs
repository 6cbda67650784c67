//! Bilinear sampling with edge replication.
//!
//! Pixel `i` covers the interval `[i, i + 1)`, so resizing maps centres
//! with `src = (dst + 0.5) * scale - 0.5`; a same-size resize is an exact copy.

use ndarray::{Array2, Array3};

/// Samples `img` at `map(y, x)` for every output pixel (coordinates in source pixels).
pub fn warp<F>(img: &Array3<f32>, out_h: usize, out_w: usize, map: F) -> Array3<f32>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let img = img.as_standard_layout();
    let (h, w, c) = img.dim();
    let src = img.as_slice().unwrap();
    let mut out = Array3::zeros((out_h, out_w, c));
    let dst = out.as_slice_mut().unwrap();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sy, sx) = map(oy as f64, ox as f64);
            let y = sy.clamp(0.0, (h - 1) as f64);
            let x = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y as usize, x as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (d, e) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            let o = (oy * out_w + ox) * c;
            for ch in 0..c {
                let top = src[a + ch] * (1.0 - fx) + src[b + ch] * fx;
                dst[o + ch] = if fy == 0.0 {
                    top
                } else {
                    let bot = src[d + ch] * (1.0 - fx) + src[e + ch] * fx;
                    top * (1.0 - fy) + bot * fy
                };
            }
        }
    }
    out
}

pub fn resize(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.as_standard_layout().into_owned();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    warp(img, out_h, out_w, |y, x| ((y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5))
}

pub fn resize_plane(plane: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let as3 = plane.to_owned().into_shape_with_order((h, w, 1)).unwrap();
    resize(&as3, out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .unwrap()
}

/// Nearest-neighbour resize for binary masks.
pub fn resize_mask(mask: &Array2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}
