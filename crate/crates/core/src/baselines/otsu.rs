//! Multilevel Otsu thresholds over a 256-bin histogram.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAX_THRESHOLDS: usize = 4;

pub fn histogram(gray: &Array2<u8>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &g in gray {
        h[g as usize] += 1;
    }
    h
}

/// `n` thresholds maximising the between-class variance. A pixel belongs to
/// class `k` when it exceeds exactly `k` thresholds. Ties resolve to the
/// lexicographically smallest threshold tuple.
pub fn otsu_thresholds(hist: &[u64; 256], n: usize) -> Result<Vec<u8>> {
    if !(1..=MAX_THRESHOLDS).contains(&n) {
        return Err(Error::validation(format!("threshold count must lie in 1..={MAX_THRESHOLDS}, got {n}")));
    }
    let levels: Vec<usize> = (0..256).filter(|&l| hist[l] > 0).collect();
    let m = levels.len();
    if m < n + 1 {
        return Err(Error::Segmentation(format!(
            "{m} distinct grey levels cannot be split into {} classes",
            n + 1
        )));
    }
    // Prefix weights and first moments over occupied levels.
    let mut cw = vec![0f64; m + 1];
    let mut cs = vec![0f64; m + 1];
    for (i, &l) in levels.iter().enumerate() {
        cw[i + 1] = cw[i] + hist[l] as f64;
        cs[i + 1] = cs[i] + (hist[l] * l as u64) as f64;
    }
    let class = |a: usize, b: usize| {
        let w = cw[b] - cw[a];
        let s = cs[b] - cs[a];
        s * s / w
    };
    // best[j][i]: optimum for levels[i..] split into j classes.
    let classes = n + 1;
    let mut best = vec![vec![f64::NEG_INFINITY; m + 1]; classes + 1];
    for i in 0..m {
        best[1][i] = class(i, m);
    }
    for j in 2..=classes {
        for i in 0..=m - j {
            best[j][i] = (i + 1..=m - j + 1)
                .map(|s| class(i, s) + best[j - 1][s])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    // Walk forward taking the earliest split that attains the optimum.
    let tol = 1e-12 * best[classes][0].abs().max(1.0);
    let mut thresholds = Vec::with_capacity(n);
    let mut start = 0;
    for j in (2..=classes).rev() {
        let target = best[j][start];
        let split = (start + 1..=m - j + 1)
            .find(|&s| class(start, s) + best[j - 1][s] >= target - tol)
            .expect("optimum is attained");
        thresholds.push(((levels[split - 1] + levels[split]) / 2) as u8);
        start = split;
    }
    Ok(thresholds)
}

/// Offsets of a digital disk, `dy^2 + dx^2 <= r^2`.
fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect()
}

/// Erosion treats out-of-frame pixels as background.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let se = disk(radius);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        se.iter().all(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask[[yy as usize, xx as usize]]
        })
    })
}

pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let se = disk(radius);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        se.iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask[[yy as usize, xx as usize]]
        })
    })
}

pub fn opening(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    dilate(&erode(mask, radius), radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn between_class_variance(hist: &[u64; 256], thresholds: &[usize]) -> f64 {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mean: f64 = hist.iter().enumerate().map(|(l, &c)| l as f64 * c as f64).sum::<f64>() / total;
        let mut bounds = vec![0usize];
        bounds.extend(thresholds.iter().map(|t| t + 1));
        bounds.push(256);
        bounds
            .windows(2)
            .map(|b| {
                let w: f64 = (b[0]..b[1]).map(|l| hist[l] as f64).sum();
                if w == 0.0 {
                    return 0.0;
                }
                let mu = (b[0]..b[1]).map(|l| l as f64 * hist[l] as f64).sum::<f64>() / w;
                w / total * (mu - mean).powi(2)
            })
            .sum()
    }

    #[test]
    fn bimodal_single_threshold() {
        let mut h = [0u64; 256];
        h[40] = 30;
        h[200] = 10;
        let t = otsu_thresholds(&h, 1).unwrap();
        assert!(t[0] >= 40 && t[0] < 200);
    }

    #[test]
    fn single_threshold_equals_exhaustive_search() {
        let mut h = [0u64; 256];
        for (l, c) in h.iter_mut().enumerate() {
            *c = ((l * 7919) % 13) as u64 + if (90..110).contains(&l) { 20 } else { 0 };
        }
        let t = otsu_thresholds(&h, 1).unwrap()[0] as usize;
        let best = (0..255).map(|t| between_class_variance(&h, &[t])).fold(f64::NEG_INFINITY, f64::max);
        assert!((between_class_variance(&h, &[t]) - best).abs() < 1e-9 * best);
    }

    #[test]
    fn three_thresholds_on_sixteen_levels_match_brute_force() {
        // 32 x 32 image quantised to 16 grey levels.
        let mut h = [0u64; 256];
        for i in 0..1024usize {
            let (y, x) = (i / 32, i % 32);
            let v = ((y * 3 + x * 5 + (x * y) % 7) % 16) * 17;
            h[v] += 1;
        }
        let levels: Vec<usize> = (0..256).filter(|&l| h[l] > 0).collect();
        assert_eq!(levels.len(), 16);
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..15 {
            for b in a + 1..15 {
                for c in b + 1..15 {
                    let t = vec![levels[a], levels[b], levels[c]];
                    let v = between_class_variance(&h, &t);
                    if v > best.0 + 1e-9 {
                        best = (v, t);
                    }
                }
            }
        }
        let got: Vec<usize> = otsu_thresholds(&h, 3).unwrap().into_iter().map(usize::from).collect();
        assert!((between_class_variance(&h, &got) - best.0).abs() < 1e-9);
        // Same partition: each threshold sits between the same adjacent levels.
        for (g, b) in got.iter().zip(&best.1) {
            let next = levels.iter().find(|&&l| l > *b).unwrap();
            assert!(g >= b && g < next);
        }
    }

    #[test]
    fn too_few_levels_fail() {
        let mut h = [0u64; 256];
        h[10] = 5;
        h[20] = 5;
        assert!(matches!(otsu_thresholds(&h, 2), Err(Error::Segmentation(_))));
        assert!(matches!(otsu_thresholds(&h, 5), Err(Error::Validation(_))));
        assert!(matches!(otsu_thresholds(&h, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn opening_removes_specks_and_keeps_blocks() {
        let mut m = Array2::from_elem((20, 20), false);
        m[[2, 2]] = true;
        for y in 8..16 {
            for x in 8..16 {
                m[[y, x]] = true;
            }
        }
        let o = opening(&m, 2);
        assert!(!o[[2, 2]]);
        assert!(o[[12, 12]]);
        assert_eq!(opening(&m, 0), m);
    }

    proptest! {
        #[test]
        fn otsu_is_optimal(counts in prop::collection::vec(0u64..20, 12), n in 1usize..=3) {
            let mut h = [0u64; 256];
            for (i, c) in counts.iter().enumerate() {
                h[i * 20 + 5] = *c;
            }
            let levels: Vec<usize> = (0..256).filter(|&l| h[l] > 0).collect();
            prop_assume!(levels.len() > n);
            let got: Vec<usize> = otsu_thresholds(&h, n).unwrap().into_iter().map(usize::from).collect();
            let mut best = f64::NEG_INFINITY;
            let idx: Vec<usize> = (0..levels.len() - 1).collect();
            let mut stack = vec![(0usize, Vec::<usize>::new())];
            while let Some((from, chosen)) = stack.pop() {
                if chosen.len() == n {
                    best = best.max(between_class_variance(&h, &chosen));
                    continue;
                }
                for &i in &idx[from..] {
                    let mut c = chosen.clone();
                    c.push(levels[i]);
                    stack.push((i + 1, c));
                }
            }
            prop_assert!((between_class_variance(&h, &got) - best).abs() <= 1e-9 * best.max(1.0));
        }

        #[test]
        fn opening_is_anti_extensive(bits in prop::collection::vec(any::<bool>(), 144), r in 0usize..3) {
            let m = Array2::from_shape_vec((12, 12), bits).unwrap();
            let o = opening(&m, r);
            prop_assert!(o.iter().zip(m.iter()).all(|(&a, &b)| !a || b));
        }
    }
}
