use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 50;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // every point coincides with a centroid
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Stops after [`MAX_ITERS`]
/// iterations or once no centroid moves more than [`TOLERANCE`]. A cluster
/// left empty is re-seeded at the point farthest from its own centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("k-means points must be finite and share one dimension"));
    }
    let mut centroids = plus_plus(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut moved: f64 = 0.0;
        for j in 0..k {
            let next = if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[assignments[a]]);
                        let db = dist2(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                assignments[far] = j;
                points[far].clone()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            moved = moved.max(dist2(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if moved < TOLERANCE {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}
