//! Lloyd's algorithm with k-means++ seeding over row-major point sets.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k` centroids of `dim` coordinates each.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distinct_points(points: &[f64], dim: usize) -> usize {
    points
        .chunks_exact(dim)
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// k-means++ seeding: first centre uniform, then proportional to squared distance.
pub fn kmeans_pp_init<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centres = vec![point(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Guard against landing on a duplicate through rounding at the tail.
        if d2[pick] == 0.0 {
            pick = d2.iter().position(|&d| d > 0.0).unwrap_or(pick);
        }
        centres.push(point(pick).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), centres.last().unwrap()));
        }
    }
    centres
}

/// Nearest centre for every point; ties go to the lower index.
pub fn assign(points: &[f64], dim: usize, centres: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .chunks_exact(dim)
        .map(|p| {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (c, centre) in centres.iter().enumerate() {
                let d = sq_dist(p, centre);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (labels, inertia)
}

/// Runs Lloyd iterations from `centres` until no centre moves more than
/// `TOLERANCE` or `max_iter` is reached. Empty clusters keep their centre.
pub fn lloyd(points: &[f64], dim: usize, mut centres: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let k = centres.len();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let (labels, _) = assign(points, dim, &centres);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.chunks_exact(dim).zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centres[c]).sqrt());
            centres[c] = next;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    let (assignment, inertia) = assign(points, dim, &centres);
    KMeans {
        centroids: centres,
        assignment,
        iterations,
        inertia,
    }
}

pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::validation(format!("k must be at least 2, got {k}")));
    }
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::validation("malformed point set"));
    }
    let distinct = distinct_points(points, dim);
    if k > distinct {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {distinct} distinct pixel values"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(points, dim, k, &mut rng);
    Ok(lloyd(points, dim, init, MAX_ITERATIONS))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain reference: reassign, recompute, repeat until labels stop changing.
    fn reference(points: &[f64], dim: usize, mut centres: Vec<Vec<f64>>) -> Vec<usize> {
        let mut labels: Vec<usize> = vec![usize::MAX; points.len() / dim];
        loop {
            let next: Vec<usize> = points
                .chunks(dim)
                .map(|p| {
                    (0..centres.len())
                        .min_by(|&a, &b| sq_dist(p, &centres[a]).partial_cmp(&sq_dist(p, &centres[b])).unwrap())
                        .unwrap()
                })
                .collect();
            if next == labels {
                return labels;
            }
            labels = next;
            for (c, centre) in centres.iter_mut().enumerate() {
                let members: Vec<&[f64]> = points.chunks(dim).zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for j in 0..dim {
                        centre[j] = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
        }
    }

    fn three_tone() -> Vec<f64> {
        (0..64)
            .flat_map(|i| {
                let (y, x) = (i / 8, i % 8);
                let base = if x < 3 { 0.1 } else if y < 4 { 0.5 } else { 0.9 };
                let wobble = ((i * 37) % 7) as f64 * 0.003;
                [base + wobble, base - wobble, 0.2]
            })
            .collect()
    }

    #[test]
    fn matches_reference_lloyd_from_the_same_seed() {
        let pts = three_tone();
        let res = kmeans(&pts, 3, 3, 17).unwrap();
        let init = kmeans_pp_init(&pts, 3, 3, &mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(res.assignment, reference(&pts, 3, init.clone()));
        let capped = lloyd(&pts, 3, init, res.iterations);
        assert!(res.inertia <= capped.inertia + 1e-12);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![0.5; 30];
        assert!(matches!(kmeans(&pts, 3, 2, 0), Err(Error::Validation(_))));
        assert!(kmeans(&[0.0, 1.0], 1, 1, 0).is_err());
    }

    #[test]
    fn seeding_never_duplicates_centres() {
        let mut pts = vec![0.0; 98];
        pts.extend([1.0, 2.0]);
        for seed in 0..20 {
            let c = kmeans_pp_init(&pts, 1, 3, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut vals: Vec<f64> = c.iter().map(|v| v[0]).collect();
            vals.sort_by(f64::total_cmp);
            assert_eq!(vals, vec![0.0, 1.0, 2.0]);
        }
    }
}
