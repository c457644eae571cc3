//! Seeded Lloyd k-means with k-means++ initialisation.

use rand::Rng as _;

use super::sq_dist;
use crate::seeds::Rng;

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// k-means++ seeding. Stops early once every point coincides with a center.
fn init_centers(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let center = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &center));
        }
        centers.push(center);
    }
    centers
}

/// Cluster index of every point. Clusters that end up empty are dropped and
/// the remaining indices are compacted to `0..n_clusters`.
pub fn kmeans(points: &[&[f64]], k: usize, max_iter: usize, rng: &mut Rng) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return vec![0; points.len()];
    }
    let dim = points[0].len();
    let mut centers = init_centers(points, k.min(points.len()), rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers)).collect();

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        centers = sums
            .into_iter()
            .zip(&counts)
            .filter(|(_, &n)| n > 0)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers)).collect();
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
    }

    let mut remap = vec![usize::MAX; centers.len()];
    let mut next_id = 0;
    for c in &mut assignment {
        if remap[*c] == usize::MAX {
            remap[*c] = next_id;
            next_id += 1;
        }
        *c = remap[*c];
    }
    assignment
}
