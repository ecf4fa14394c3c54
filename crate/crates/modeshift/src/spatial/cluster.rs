//! Hierarchical clustering of zone embeddings into effectiveness categories.
//!
//! Agglomerative Ward linkage over candidate cluster counts k in [2, 8];
//! the silhouette coefficient picks k (Calinski-Harabasz reported
//! alongside); clusters map to HI/MI/LI/NI by descending mean car-travel
//! reduction when k = 4. A principal-components projection gives 2-D
//! coordinates for plotting.
//!
//! # References
//!
//! - Ward (1963), "Hierarchical grouping to optimize an objective function."
//! - Rousseeuw (1987), "Silhouettes: a graphical aid to the interpretation
//!   and validation of cluster analysis."
//! - Calinski & Harabasz (1974).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Program-effectiveness category of a zone, ordered by descending mean
/// car-travel reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    HI,
    MI,
    LI,
    NI,
}

pub const ALL_CATEGORIES: [Category; 4] = [Category::HI, Category::MI, Category::LI, Category::NI];

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::HI => "HI",
            Category::MI => "MI",
            Category::LI => "LI",
            Category::NI => "NI",
        })
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HI" => Ok(Category::HI),
            "MI" => Ok(Category::MI),
            "LI" => Ok(Category::LI),
            "NI" => Ok(Category::NI),
            other => Err(Error::Validation(format!("unknown category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneClusterResult {
    pub zone_ids: Vec<u32>,
    /// Chosen-k labels, 0-based, canonical order (first occurrence).
    pub cluster: Vec<usize>,
    pub k: usize,
    /// Present when k = 4: category per zone by descending mean
    /// car-travel reduction of the cluster.
    pub category: Option<Vec<Category>>,
    pub scores: Vec<KScore>,
    /// 2-D principal-components projection of the embeddings.
    pub projection: Vec<(f64, f64)>,
    /// All embeddings identical: clustering is undefined, one cluster is
    /// reported.
    pub degenerate: bool,
}

/// Ward dendrogram by the Lance-Williams recurrence on squared Euclidean
/// distances. Returns the merge sequence as (cluster_a, cluster_b) over
/// point indices (clusters named by their smallest member).
fn ward_merges(points: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = points.len();
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for (a, b) in points[i].iter().zip(&points[j]) {
                let diff = a - b;
                s += diff * diff;
            }
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    let mut active: Vec<usize> = (0..n).collect();
    let mut size = vec![1.0f64; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while active.len() > 1 {
        // Closest active pair; ties by lowest indices.
        let (mut bi, mut bj, mut best) = (0usize, 0usize, f64::INFINITY);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let dij = d[i * n + j];
                if dij < best {
                    best = dij;
                    bi = i;
                    bj = j;
                }
            }
        }
        let (a, b) = (bi.min(bj), bi.max(bj));
        merges.push((a, b));
        // Lance-Williams update for Ward linkage; cluster `a` absorbs `b`.
        let (na, nb) = (size[a], size[b]);
        for &c in &active {
            if c == a || c == b {
                continue;
            }
            let nc = size[c];
            let new = ((na + nc) * d[a * n + c] + (nb + nc) * d[b * n + c] - nc * d[a * n + b])
                / (na + nb + nc);
            d[a * n + c] = new;
            d[c * n + a] = new;
        }
        size[a] += size[b];
        active.retain(|&c| c != b);
    }
    merges
}

/// Cut the merge sequence at k clusters; labels are canonicalized by first
/// occurrence.
fn labels_at_k(merges: &[(usize, usize)], n: usize, k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in merges.iter().take(n - k) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
    let mut label_of_root = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        let next = label_of_root.len();
        labels.push(*label_of_root.entry(r).or_insert(next));
    }
    labels
}

/// Mean silhouette over all points; `None` when every pairwise distance is
/// zero or a cluster structure is degenerate.
fn silhouette(dist: &[f64], n: usize, labels: &[usize], k: usize) -> Option<f64> {
    if k < 2 {
        return None;
    }
    let mut cluster_sizes = vec![0usize; k];
    for &l in labels {
        cluster_sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut any = false;
    for i in 0..n {
        if cluster_sizes[labels[i]] <= 1 {
            continue; // s(i) = 0 for singletons
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let a = sums[labels[i]] / (cluster_sizes[labels[i]] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != labels[i] && cluster_sizes[c] > 0 {
                b = b.min(sums[c] / cluster_sizes[c] as f64);
            }
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
            any = true;
        }
    }
    if any {
        Some(total / n as f64)
    } else {
        None
    }
}

fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    let n = points.len();
    if k < 2 || n <= k {
        return None;
    }
    let dim = points[0].len();
    let mut grand = vec![0.0f64; dim];
    for p in points {
        for (g, &v) in grand.iter_mut().zip(p) {
            *g += v;
        }
    }
    for g in &mut grand {
        *g /= n as f64;
    }
    let mut centroids = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(p) {
            *c += v;
        }
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= cnt.max(1) as f64;
        }
    }
    let mut between = 0.0;
    for (c, &cnt) in centroids.iter().zip(&counts) {
        let mut s = 0.0;
        for (a, b) in c.iter().zip(&grand) {
            s += (a - b) * (a - b);
        }
        between += cnt as f64 * s;
    }
    let mut within = 0.0;
    for (p, &l) in points.iter().zip(labels) {
        for (a, b) in p.iter().zip(&centroids[l]) {
            within += (a - b) * (a - b);
        }
    }
    if within <= 0.0 {
        return None;
    }
    Some((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Principal-components 2-D projection with deterministic sign convention.
fn pca_project(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    let dim = points[0].len();
    let mut mean = vec![0.0f64; dim];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    // Two largest eigenpairs.
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut axes = Vec::new();
    for &idx in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Sign convention: the largest-magnitude loading is positive.
        let mut arg = 0usize;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[arg].abs() {
                arg = i;
            }
        }
        if v[arg] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; dim]);
    }
    (0..n)
        .map(|i| {
            let px: f64 = (0..dim).map(|j| centered[(i, j)] * axes[0][j]).sum();
            let py: f64 = (0..dim).map(|j| centered[(i, j)] * axes[1][j]).sum();
            (px, py)
        })
        .collect()
}

/// Cluster per-zone embeddings; `car_reduction` drives the category
/// ordering when four clusters are chosen.
pub fn cluster_zones(
    zone_ids: &[u32],
    embeddings: &[Vec<f64>],
    car_reduction: &[f64],
    k_min: usize,
    k_max: usize,
) -> Result<ZoneClusterResult> {
    let n = embeddings.len();
    if n < 8 {
        return Err(Error::Validation(format!("clustering needs at least 8 zones, got {n}")));
    }
    if zone_ids.len() != n || car_reduction.len() != n {
        return Err(Error::Validation("zone ids and outcomes must align with embeddings".into()));
    }
    if k_min < 2 || k_min > k_max {
        return Err(Error::Config("cluster range must satisfy 2 <= k_min <= k_max".into()));
    }
    if k_max >= n {
        return Err(Error::Validation(format!("fewer zones ({n}) than the largest k ({k_max})")));
    }

    let projection = pca_project(embeddings);

    // Degenerate geometry: all embeddings identical.
    let spread = embeddings
        .iter()
        .flat_map(|p| p.iter().zip(&embeddings[0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    if spread < 1e-12 {
        return Ok(ZoneClusterResult {
            zone_ids: zone_ids.to_vec(),
            cluster: vec![0; n],
            k: 1,
            category: None,
            scores: Vec::new(),
            projection,
            degenerate: true,
        });
    }

    let merges = ward_merges(embeddings);
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for (a, b) in embeddings[i].iter().zip(&embeddings[j]) {
                s += (a - b) * (a - b);
            }
            let d = s.sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for k in k_min..=k_max {
        let labels = labels_at_k(&merges, n, k);
        let sil = silhouette(&dist, n, &labels, k);
        let ch = calinski_harabasz(embeddings, &labels, k);
        scores.push(KScore { k, silhouette: sil, calinski_harabasz: ch });
        if let Some(s) = sil {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    let k = best.map(|(k, _)| k).unwrap_or(k_min);
    let cluster = labels_at_k(&merges, n, k);

    let category = if k == 4 {
        let mut sums = vec![(0.0f64, 0usize); 4];
        for (i, &l) in cluster.iter().enumerate() {
            sums[l].0 += car_reduction[i];
            sums[l].1 += 1;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ma = sums[a].0 / sums[a].1.max(1) as f64;
            let mb = sums[b].0 / sums[b].1.max(1) as f64;
            mb.partial_cmp(&ma).unwrap()
        });
        let mut cat_of_cluster = vec![Category::NI; 4];
        for (rank, &cl) in order.iter().enumerate() {
            cat_of_cluster[cl] = ALL_CATEGORIES[rank];
        }
        Some(cluster.iter().map(|&l| cat_of_cluster[l]).collect())
    } else {
        None
    };

    Ok(ZoneClusterResult {
        zone_ids: zone_ids.to_vec(),
        cluster,
        k,
        category,
        scores,
        projection,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, center: &[f64], n: usize, sd: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| c + (rng.random::<f64>() * 2.0 - 1.0) * sd)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn four_separated_blobs_select_k4_with_high_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers: [[f64; 6]; 4] = [
            [8.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 8.0, 0.0, 0.0, 4.0, 0.0],
            [0.0, 0.0, 8.0, 0.0, 0.0, 4.0],
            [0.0, 0.0, 0.0, 8.0, 0.0, 0.0],
        ];
        let mut points = Vec::new();
        let mut truth = Vec::new();
        let mut reductions = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            let pts = blob(&mut rng, c, 12, 0.45);
            for p in pts {
                points.push(p);
                truth.push(b);
                reductions.push(0.4 - 0.1 * b as f64);
            }
        }
        let ids: Vec<u32> = (0..points.len() as u32).collect();
        let res = cluster_zones(&ids, &points, &reductions, 2, 8).unwrap();
        assert_eq!(res.k, 4);
        // Purity against the planted blobs.
        let mut correct = 0usize;
        for c in 0..4 {
            let mut counts = [0usize; 4];
            for i in 0..points.len() {
                if res.cluster[i] == c {
                    counts[truth[i]] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        let purity = correct as f64 / points.len() as f64;
        assert!(purity >= 0.95, "purity {purity}");
        // Category ordering follows the planted descending reductions.
        let cats = res.category.unwrap();
        for i in 0..points.len() {
            let expected = ALL_CATEGORIES[truth[i]];
            assert_eq!(cats[i], expected);
        }
    }

    #[test]
    fn two_blobs_select_k2_with_strong_silhouette() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut points = blob(&mut rng, &[0.0, 0.0, 0.0], 15, 0.3);
        points.extend(blob(&mut rng, &[10.0, 10.0, 10.0], 15, 0.3));
        let ids: Vec<u32> = (0..30).collect();
        let reductions = vec![0.1; 30];
        let res = cluster_zones(&ids, &points, &reductions, 2, 8).unwrap();
        assert_eq!(res.k, 2);
        let s = res.scores.iter().find(|s| s.k == 2).unwrap().silhouette.unwrap();
        assert!(s > 0.8, "silhouette {s}");
        assert!(res.category.is_none());
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let points = vec![vec![1.0, 2.0, 3.0]; 10];
        let ids: Vec<u32> = (0..10).collect();
        let res = cluster_zones(&ids, &points, &vec![0.0; 10], 2, 8).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.k, 1);
        assert!(res.cluster.iter().all(|&c| c == 0));
    }

    #[test]
    fn too_few_zones_error() {
        let points = vec![vec![0.0; 3]; 5];
        let ids: Vec<u32> = (0..5).collect();
        assert!(cluster_zones(&ids, &points, &vec![0.0; 5], 2, 8).is_err());
    }

    #[test]
    fn silhouette_bounds_and_ch_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut points = blob(&mut rng, &[0.0, 0.0], 12, 1.0);
        points.extend(blob(&mut rng, &[3.0, 1.0], 12, 1.0));
        points.extend(blob(&mut rng, &[1.0, 4.0], 12, 1.0));
        let ids: Vec<u32> = (0..36).collect();
        let res = cluster_zones(&ids, &points, &vec![0.2; 36], 2, 8).unwrap();
        for s in &res.scores {
            if let Some(v) = s.silhouette {
                assert!((-1.0..=1.0).contains(&v));
            }
            if let Some(v) = s.calinski_harabasz {
                assert!(v > 0.0);
            }
        }
    }
}
