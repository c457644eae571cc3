//! Class-imbalance treatments for a set of labeled windows.
//!
//! - random undersampling of the majority class,
//! - k-means SMOTE: cluster, pick minority-dominated clusters, interpolate
//!   inside them with more samples going to sparser clusters,
//! - SMOTE followed by edited nearest neighbours (ENN) cleaning.
//!
//! Distances are Euclidean on the raw feature vectors. Every neighbour query
//! breaks distance ties by the lower index.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_counts, LabeledWindow};
use crate::error::{Error, Result};
use crate::seeds::{self, Rng};

pub mod kmeans;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    #[default]
    None,
    Undersample,
    KmeansSmote,
    SmoteEnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSpec {
    pub method: ResampleMethod,
    pub k_neighbors: usize,
    pub k_clusters: usize,
    /// Minimum minority fraction (exclusive) for a cluster to be oversampled.
    pub cluster_imbalance_threshold: f64,
    pub enn_k: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self {
            method: ResampleMethod::None,
            k_neighbors: 5,
            k_clusters: 8,
            cluster_imbalance_threshold: 0.5,
            enn_k: 3,
            kmeans_max_iter: 100,
            seed: 0,
        }
    }
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 || self.k_clusters == 0 || self.enn_k == 0 {
            return Err(Error::config(
                "k_neighbors, k_clusters and enn_k must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.cluster_imbalance_threshold) {
            return Err(Error::config(
                "cluster_imbalance_threshold must lie in [0, 1)",
            ));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::config("kmeans_max_iter must be >= 1"));
        }
        Ok(())
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` candidates closest to `query`, nearest first, ties to lower id.
fn nearest<'a>(
    query: &[f64],
    candidates: impl Iterator<Item = (usize, &'a [f64])>,
    k: usize,
) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (id, p) in candidates {
        let d = sq_dist(query, p);
        if best.len() == k {
            let &(worst_d, worst_id) = best.last().expect("k >= 1");
            if d > worst_d || (d == worst_d && id > worst_id) {
                continue;
            }
        }
        let pos = best.partition_point(|&(bd, bid)| bd < d || (bd == d && bid < id));
        best.insert(pos, (d, id));
        best.truncate(k);
    }
    best.into_iter().map(|(_, id)| id).collect()
}

/// Indices of the `k` points nearest to `query` (Euclidean), nearest first.
/// Equidistant points are ordered by index. A query that is itself one of
/// the points is not excluded; callers filter it out when needed.
pub fn knn<P: AsRef<[f64]>>(query: &[f64], points: &[P], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::input(format!(
            "asked for {k} neighbours among {} points",
            points.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(nearest(
        query,
        points.iter().enumerate().map(|(i, p)| (i, p.as_ref())),
        k,
    ))
}

/// Majority and minority labels, or an error when a class is missing.
fn class_roles(windows: &[LabeledWindow]) -> Result<([usize; 2], u8)> {
    let counts = class_counts(windows);
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::imbalance(format!(
            "both classes required, got counts {counts:?}"
        )));
    }
    let minority = u8::from(counts[1] < counts[0]);
    Ok((counts, minority))
}

fn check_dims(windows: &[LabeledWindow]) -> Result<()> {
    if let Some(first) = windows.first() {
        if windows.iter().any(|w| w.x.len() != first.x.len()) {
            return Err(Error::input("windows have differing feature lengths"));
        }
    }
    Ok(())
}

/// Subsamples the majority class uniformly without replacement down to the
/// minority count. Kept windows stay in input order.
pub fn random_undersample(windows: &[LabeledWindow], seed: u64) -> Result<Vec<LabeledWindow>> {
    let (counts, minority) = class_roles(windows)?;
    let majority = 1 - minority;
    let n_min = counts[usize::from(minority)];
    let n_maj = counts[usize::from(majority)];

    let mut rng = seeds::derive_rng(seed, &[seeds::purpose::RESAMPLE, 0]);
    let mut keep = vec![false; n_maj];
    for i in index::sample(&mut rng, n_maj, n_min) {
        keep[i] = true;
    }
    let mut seen = 0;
    Ok(windows
        .iter()
        .filter(|w| {
            if w.y == minority {
                return true;
            }
            seen += 1;
            keep[seen - 1]
        })
        .cloned()
        .collect())
}

/// SMOTE interpolation among `pool` (indices into `windows`).
///
/// Each sample picks a uniform anchor `a` in the pool, a uniform neighbour
/// `b` among the anchor's `k` nearest pool members, and emits
/// `a + lambda * (b - a)` with `lambda ~ U[0, 1)`.
fn smote_pool(
    windows: &[LabeledWindow],
    pool: &[usize],
    k_neighbors: usize,
    n_samples: usize,
    label: u8,
    rng: &mut Rng,
) -> Vec<LabeledWindow> {
    if n_samples == 0 {
        return Vec::new();
    }
    debug_assert!(pool.len() >= 2);
    let k = k_neighbors.min(pool.len() - 1);
    let neighbours: Vec<Vec<usize>> = pool
        .par_iter()
        .enumerate()
        .map(|(pi, &i)| {
            let others = pool
                .iter()
                .enumerate()
                .filter(|&(pj, _)| pj != pi)
                .map(|(pj, &j)| (pj, windows[j].x.as_slice()));
            nearest(&windows[i].x, others, k)
        })
        .collect();

    (0..n_samples)
        .map(|_| {
            let a_pos = rng.random_range(0..pool.len());
            let nb = &neighbours[a_pos];
            let b_pos = nb[rng.random_range(0..nb.len())];
            let lambda: f64 = rng.random();
            let a = &windows[pool[a_pos]];
            let b = &windows[pool[b_pos]];
            let x =
                a.x.iter()
                    .zip(&b.x)
                    .map(|(&ai, &bi)| ai + lambda * (bi - ai))
                    .collect();
            LabeledWindow::new(a.user_id, x, label)
        })
        .collect()
}

/// Synthetic minority windows bringing the classes to parity using plain
/// SMOTE over every minority window.
pub fn smote(
    windows: &[LabeledWindow],
    k_neighbors: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledWindow>> {
    let (counts, minority) = class_roles(windows)?;
    let pool: Vec<usize> = (0..windows.len())
        .filter(|&i| windows[i].y == minority)
        .collect();
    if pool.len() < 2 {
        return Err(Error::imbalance(
            "SMOTE needs at least two minority samples",
        ));
    }
    let needed = counts[usize::from(1 - minority)] - counts[usize::from(minority)];
    Ok(smote_pool(
        windows,
        &pool,
        k_neighbors,
        needed,
        minority,
        rng,
    ))
}

/// Mean Euclidean distance over all unordered pairs of `pool`.
fn mean_pairwise_distance(windows: &[LabeledWindow], pool: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in pool.iter().enumerate() {
        for &j in &pool[a + 1..] {
            total += sq_dist(&windows[i].x, &windows[j].x).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Splits `total` proportionally to `weights` by largest remainder; ties go
/// to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut out: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// k-means SMOTE oversampling to class parity.
///
/// Clusters every window, keeps clusters whose minority fraction exceeds the
/// threshold and that hold at least two minority windows, splits the needed
/// synthetic count across them proportionally to their mean pairwise
/// minority distance, and interpolates within each cluster. Falls back to
/// plain SMOTE when no cluster qualifies. Output: the input windows followed
/// by the synthetic ones.
pub fn kmeans_smote(windows: &[LabeledWindow], spec: &ResampleSpec) -> Result<Vec<LabeledWindow>> {
    spec.validate()?;
    check_dims(windows)?;
    let (counts, minority) = class_roles(windows)?;
    let n_min = counts[usize::from(minority)];
    if n_min < 2 {
        return Err(Error::imbalance(
            "k-means SMOTE needs at least two minority samples",
        ));
    }
    let needed = counts[usize::from(1 - minority)] - n_min;
    let mut out = windows.to_vec();
    if needed == 0 {
        return Ok(out);
    }

    let mut rng = seeds::derive_rng(spec.seed, &[seeds::purpose::RESAMPLE, 1]);
    let points: Vec<&[f64]> = windows.iter().map(|w| w.x.as_slice()).collect();
    let k = spec.k_clusters.min(windows.len());
    let assignment = kmeans::kmeans(&points, k, spec.kmeans_max_iter, &mut rng);
    let n_clusters = assignment.iter().max().map_or(0, |m| m + 1);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut sizes = vec![0usize; n_clusters];
    for (i, &c) in assignment.iter().enumerate() {
        sizes[c] += 1;
        if windows[i].y == minority {
            members[c].push(i);
        }
    }
    let selected: Vec<usize> = (0..n_clusters)
        .filter(|&c| {
            members[c].len() >= 2
                && members[c].len() as f64 / sizes[c] as f64 > spec.cluster_imbalance_threshold
        })
        .collect();

    if selected.is_empty() {
        log::info!("k-means SMOTE: no cluster passed the filter, using plain SMOTE");
        let pool: Vec<usize> = (0..windows.len())
            .filter(|&i| windows[i].y == minority)
            .collect();
        out.extend(smote_pool(
            windows,
            &pool,
            spec.k_neighbors,
            needed,
            minority,
            &mut rng,
        ));
        return Ok(out);
    }

    let sparsity: Vec<f64> = selected
        .iter()
        .map(|&c| mean_pairwise_distance(windows, &members[c]))
        .collect();
    let quotas = apportion(needed, &sparsity);
    for (&c, &quota) in selected.iter().zip(&quotas) {
        out.extend(smote_pool(
            windows,
            &members[c],
            spec.k_neighbors,
            quota,
            minority,
            &mut rng,
        ));
    }
    Ok(out)
}

/// Iterated edited-nearest-neighbours cleaning.
///
/// A window is removed when strictly more of its `k` nearest surviving
/// neighbours carry the other label. Passes repeat until nothing changes, so
/// every survivor agrees with its neighbourhood in the final set. Returns the
/// survivor mask.
pub fn enn_filter(windows: &[LabeledWindow], k: usize) -> Vec<bool> {
    let n = windows.len();
    let mut alive = vec![true; n];
    let query = |i: usize, alive: &[bool]| {
        let others = (0..n)
            .filter(|&j| j != i && alive[j])
            .map(|j| (j, windows[j].x.as_slice()));
        nearest(&windows[i].x, others, k)
    };
    let mut neighbours: Vec<Vec<usize>> =
        (0..n).into_par_iter().map(|i| query(i, &alive)).collect();

    loop {
        let doomed: Vec<usize> = (0..n)
            .filter(|&i| alive[i])
            .filter(|&i| {
                let other = neighbours[i]
                    .iter()
                    .filter(|&&j| windows[j].y != windows[i].y)
                    .count();
                2 * other > neighbours[i].len()
            })
            .collect();
        if doomed.is_empty() {
            return alive;
        }
        for &i in &doomed {
            alive[i] = false;
        }
        // Only lists that lost a member can change once the set shrinks.
        let stale: Vec<usize> = (0..n)
            .filter(|&i| alive[i] && neighbours[i].iter().any(|&j| !alive[j]))
            .collect();
        let fresh: Vec<Vec<usize>> = stale.par_iter().map(|&i| query(i, &alive)).collect();
        for (i, nb) in stale.into_iter().zip(fresh) {
            neighbours[i] = nb;
        }
    }
}

/// SMOTE to parity, then iterated ENN over both classes.
pub fn smote_enn(windows: &[LabeledWindow], spec: &ResampleSpec) -> Result<Vec<LabeledWindow>> {
    spec.validate()?;
    check_dims(windows)?;
    let mut rng = seeds::derive_rng(spec.seed, &[seeds::purpose::RESAMPLE, 2]);
    let mut all = windows.to_vec();
    all.extend(smote(windows, spec.k_neighbors, &mut rng)?);

    let alive = enn_filter(&all, spec.enn_k);
    let out: Vec<LabeledWindow> = all
        .into_iter()
        .zip(alive)
        .filter_map(|(w, keep)| keep.then_some(w))
        .collect();
    let counts = class_counts(&out);
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::imbalance(format!(
            "ENN removed an entire class (survivors {counts:?})"
        )));
    }
    Ok(out)
}

/// Applies the method named in `spec`.
pub fn resample(windows: &[LabeledWindow], spec: &ResampleSpec) -> Result<Vec<LabeledWindow>> {
    match spec.method {
        ResampleMethod::None => Ok(windows.to_vec()),
        ResampleMethod::Undersample => random_undersample(windows, spec.seed),
        ResampleMethod::KmeansSmote => kmeans_smote(windows, spec),
        ResampleMethod::SmoteEnn => smote_enn(windows, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::UserId;

    fn w(x: Vec<f64>, y: u8) -> LabeledWindow {
        LabeledWindow::new(UserId(0), x, y)
    }

    fn imbalanced(n0: usize, n1: usize, seed: u64) -> Vec<LabeledWindow> {
        let mut rng = seeds::rng_from(seed);
        (0..n0 + n1)
            .map(|i| {
                let y = u8::from(i >= n0);
                let base = if y == 1 { 2.0 } else { 0.0 };
                let x = (0..4)
                    .map(|_| base + rng.random_range(0..3) as f64)
                    .collect();
                w(x, y)
            })
            .collect()
    }

    #[test]
    fn knn_line() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(knn(&[0.0], &pts, 3).unwrap(), vec![0, 1, 2]);
        let others: Vec<_> = pts[1..].to_vec();
        assert_eq!(knn(&[0.0], &others, 2).unwrap(), vec![0, 1]);
        assert!(matches!(knn(&[0.0], &pts, 4), Err(Error::Input(_))));
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = vec![vec![2.0], vec![-1.0], vec![1.0], vec![-2.0]];
        assert_eq!(knn(&[0.0], &pts, 1).unwrap(), vec![1]);
        assert_eq!(knn(&[0.0], &pts, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn undersample_counts() {
        for (n0, n1, expect) in [(75, 25, 25), (10, 10, 10), (3, 1, 1)] {
            let out = random_undersample(&imbalanced(n0, n1, 1), 4).unwrap();
            assert_eq!(class_counts(&out), [expect, expect]);
        }
        let single = imbalanced(5, 0, 1);
        assert!(matches!(
            random_undersample(&single, 1),
            Err(Error::Imbalance(_))
        ));
    }

    #[test]
    fn undersample_balanced_is_identity() {
        let data = imbalanced(10, 10, 2);
        assert_eq!(random_undersample(&data, 9).unwrap(), data);
    }

    #[test]
    fn kmeans_smote_identical_minority() {
        let mut data = imbalanced(20, 0, 3);
        let q = vec![7.0, 7.0, 7.0, 7.0];
        data.push(w(q.clone(), 1));
        data.push(w(q.clone(), 1));
        let out = kmeans_smote(&data, &ResampleSpec::default()).unwrap();
        assert_eq!(class_counts(&out), [20, 20]);
        assert!(out[data.len()..].iter().all(|s| s.x == q && s.y == 1));
    }

    #[test]
    fn kmeans_smote_balances() {
        let out = kmeans_smote(&imbalanced(75, 25, 4), &ResampleSpec::default()).unwrap();
        assert_eq!(class_counts(&out), [75, 75]);
        let too_few = imbalanced(30, 1, 4);
        assert!(matches!(
            kmeans_smote(&too_few, &ResampleSpec::default()),
            Err(Error::Imbalance(_))
        ));
    }

    #[test]
    fn kmeans_smote_is_deterministic() {
        let data = imbalanced(60, 13, 5);
        let spec = ResampleSpec {
            seed: 3,
            ..Default::default()
        };
        assert_eq!(
            kmeans_smote(&data, &spec).unwrap(),
            kmeans_smote(&data, &spec).unwrap()
        );
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[1.0, 1.0, 2.0]), vec![3, 2, 5]);
        assert_eq!(apportion(3, &[0.0, 0.0]), vec![2, 1]);
        assert_eq!(apportion(7, &[1.0]), vec![7]);
    }

    #[test]
    fn enn_removes_isolated_point() {
        let mut data = vec![
            w(vec![0.0, 0.0], 1),
            w(vec![1.0, 0.0], 1),
            w(vec![0.0, 1.0], 1),
            w(vec![-1.0, 0.0], 1),
        ];
        data.push(w(vec![0.1, 0.1], 0));
        let alive = enn_filter(&data, 3);
        assert!(!alive[4]);
        assert!(alive[..4].iter().all(|&a| a));
    }

    #[test]
    fn smote_enn_separated_balanced_is_identity() {
        let mut data = Vec::new();
        for i in 0..6 {
            data.push(w(vec![i as f64 * 0.1, 0.0], 0));
            data.push(w(vec![100.0 + i as f64 * 0.1, 0.0], 1));
        }
        let out = smote_enn(&data, &ResampleSpec::default()).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn resample_dispatch() {
        let data = imbalanced(30, 10, 8);
        let none = resample(&data, &ResampleSpec::default()).unwrap();
        assert_eq!(none, data);
        let spec = ResampleSpec {
            method: ResampleMethod::Undersample,
            ..Default::default()
        };
        assert_eq!(class_counts(&resample(&data, &spec).unwrap()), [10, 10]);
    }

    #[test]
    fn spec_validation() {
        assert!(ResampleSpec::default().validate().is_ok());
        assert!(ResampleSpec {
            enn_k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ResampleSpec {
            k_clusters: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ResampleSpec {
            cluster_imbalance_threshold: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
