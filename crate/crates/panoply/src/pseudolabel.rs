//! Pseudo-labels from the lifted feature field: spherical k-means classes,
//! per-class adaptive DBSCAN instances, and things/stuff tagging.

use crate::embed::{things_stuff, EmbeddingProvider, ThingStuff};
use crate::error::{Error, Result};
use crate::lift::FeatureField;
use crate::par;
use crate::spatial::GridIndex;
use crate::{cloud::PointCloud, derive_seed};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Result of spherical k-means on unit-normalized feature rows.
#[derive(Debug, Clone)]
pub struct SphericalKMeansResult {
    /// Per-row cluster index in 0..k.
    pub assignments: Vec<u32>,
    /// K unit-norm centroids, row-major k x dim.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Mean cosine similarity of rows to their assigned centroid.
    pub inertia: f64,
    /// Inertia measured after each assignment step (non-decreasing).
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl SphericalKMeansResult {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

fn normalize_rows(rows: &[f32], dim: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut out = vec![0.0f64; rows.len()];
    par::for_each_chunk_mut(&mut out, dim, |i, chunk| {
        let _ = i;
        let src = &rows[i * dim..(i + 1) * dim];
        let norm = src.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (o, x) in chunk.iter_mut().zip(src) {
                *o = *x as f64 / norm;
            }
        }
    });
    debug_assert_eq!(out.len(), n * dim);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means with k-means++-style seeding. Rows are normalized before
/// clustering; assignments maximize the dot product with unit centroids; empty
/// clusters are re-seeded from the worst-fit row.
pub fn spherical_kmeans(
    rows: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<SphericalKMeansResult> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::argument("feature matrix shape mismatch"));
    }
    let n = rows.len() / dim;
    if k < 1 {
        return Err(Error::argument("k must be >= 1"));
    }
    if n < k {
        return Err(Error::argument(format!(
            "spherical k-means needs at least k={k} rows, got {n}"
        )));
    }
    let data = normalize_rows(rows, dim);
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ style init on cosine distance (1 - cos).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut best_cos: Vec<f64> = (0..n).map(|i| dot(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let weights: Vec<f64> = best_cos.iter().map(|&c| (1.0 - c).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 1e-12 {
            WeightedIndex::new(&weights)
                .map(|d| d.sample(&mut rng))
                .unwrap_or_else(|_| rng.gen_range(0..n))
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let ci = centroids.len() / dim - 1;
        for i in 0..n {
            let c = dot(row(i), &centroids[ci * dim..(ci + 1) * dim]);
            if c > best_cos[i] {
                best_cos[i] = c;
            }
        }
    }

    let mut assignments = vec![0u32; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0usize;
    for _iter in 0..max_iter.max(1) {
        iterations += 1;
        // Assign: argmax dot, ties to the lower cluster index.
        let new_assignments: Vec<u32> = par::map_range(n, |i| {
            let r = row(i);
            let mut best = 0usize;
            let mut best_dot = f64::NEG_INFINITY;
            for c in 0..k {
                let d = dot(r, &centroids[c * dim..(c + 1) * dim]);
                if d > best_dot {
                    best_dot = d;
                    best = c;
                }
            }
            best as u32
        });
        let changes = new_assignments
            .iter()
            .zip(&assignments)
            .filter(|(a, b)| a != b)
            .count();
        assignments = new_assignments;

        let inertia = (0..n)
            .map(|i| dot(row(i), &centroids[assignments[i] as usize * dim..][..dim]))
            .sum::<f64>()
            / n as f64;
        inertia_trace.push(inertia);

        // Update: renormalized member sums; empty clusters re-seed from the
        // worst-fit row.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += *x;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            let target = &mut sums[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                let worst = (0..n)
                    .min_by(|&a, &b| {
                        let da = dot(row(a), &centroids[assignments[a] as usize * dim..][..dim]);
                        let db = dot(row(b), &centroids[assignments[b] as usize * dim..][..dim]);
                        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                    })
                    .expect("n >= 1");
                target.copy_from_slice(row(worst));
            } else {
                let norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for x in target.iter_mut() {
                        *x /= norm;
                    }
                } else {
                    target.copy_from_slice(&centroids[c * dim..(c + 1) * dim]);
                }
            }
            let old = &centroids[c * dim..(c + 1) * dim];
            let delta = target
                .iter()
                .zip(old)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            movement = movement.max(delta);
        }
        centroids.copy_from_slice(&sums);

        if changes == 0 || movement < tol {
            break;
        }
    }

    let inertia = *inertia_trace.last().expect("at least one iteration");
    Ok(SphericalKMeansResult {
        assignments,
        centroids,
        dim,
        inertia,
        inertia_trace,
        iterations,
    })
}

/// Classic density-reachability DBSCAN over 3D positions with canonical,
/// order-free semantics:
///
/// - a point is core iff its closed eps-ball holds at least `min_pts` points
///   (itself included);
/// - clusters are connected components of core points under eps-adjacency;
/// - a border point joins the cluster of its lowest-index core neighbor;
/// - cluster ids are renumbered by each cluster's lowest member index.
pub fn adaptive_dbscan(positions: &[[f64; 3]], eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if !(eps > 0.0) {
        return Err(Error::argument("eps must be > 0"));
    }
    if min_pts < 1 {
        return Err(Error::argument("min_pts must be >= 1"));
    }
    let n = positions.len();
    let index = GridIndex::new(positions, eps);
    let neighborhoods: Vec<Vec<u32>> =
        par::map_range(n, |i| index.within(&positions[i], eps));
    let core: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() >= min_pts).collect();

    // Union core points across eps-adjacency.
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighborhoods[i] {
            if core[j as usize] {
                let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j));
                if a != b {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi as usize] = lo;
                }
            }
        }
    }

    let mut labels = vec![-1i32; n];
    // Components keyed by root (the lowest core index in each component,
    // since unions always attach the larger root to the smaller).
    let mut roots: Vec<u32> = (0..n)
        .filter(|&i| core[i])
        .map(|i| find(&mut parent, i as u32))
        .collect();
    roots.sort_unstable();
    roots.dedup();
    let cluster_of_root =
        |r: u32, roots: &[u32]| roots.binary_search(&r).expect("known root") as i32;
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i as u32);
            labels[i] = cluster_of_root(r, &roots);
        }
    }
    for i in 0..n {
        if core[i] || labels[i] != -1 {
            continue;
        }
        // Border point: lowest-index core neighbor decides the cluster.
        if let Some(&c) = neighborhoods[i].iter().find(|&&j| core[j as usize]) {
            let r = find(&mut parent, c);
            labels[i] = cluster_of_root(r, &roots);
        }
    }

    // Renumber by lowest member index.
    let n_clusters = roots.len();
    let mut first_member = vec![u32::MAX; n_clusters];
    for i in 0..n {
        let l = labels[i];
        if l >= 0 && first_member[l as usize] == u32::MAX {
            first_member[l as usize] = i as u32;
        }
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by_key(|&c| first_member[c]);
    let mut remap = vec![0i32; n_clusters];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id as i32;
    }
    for l in labels.iter_mut() {
        if *l >= 0 {
            *l = remap[*l as usize];
        }
    }
    Ok(labels)
}

/// Density-derived DBSCAN parameters for one class:
/// eps = eps_scale * median 4th-nearest-neighbor distance (falling back to the
/// farthest available neighbor for tiny classes), minPts = max(base,
/// round(log2 n)).
pub fn class_density_params(
    positions: &[[f64; 3]],
    base_minpts: usize,
    eps_scale: f64,
) -> Result<(f64, usize)> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::argument("class_density_params needs at least 2 points"));
    }
    if !(eps_scale > 0.0) {
        return Err(Error::argument("eps_scale must be > 0"));
    }
    let k = 4.min(n - 1);
    let index = GridIndex::with_auto_cell(positions);
    let mut kth: Vec<f64> = par::map_range(n, |i| {
        let nb = index.k_nearest(i, k);
        let j = *nb.last().expect("k >= 1") as usize;
        crate::spatial::dist2(&positions[i], &positions[j]).sqrt()
    });
    kth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if kth.len() % 2 == 1 {
        kth[kth.len() / 2]
    } else {
        0.5 * (kth[kth.len() / 2 - 1] + kth[kth.len() / 2])
    };
    let eps = eps_scale * median;
    if !(eps > 0.0) {
        return Err(Error::argument("degenerate class: zero neighbor distances"));
    }
    let min_pts = base_minpts.max((n as f64).log2().round() as usize);
    Ok((eps, min_pts))
}

/// Per-point pseudo-labels plus per-class metadata.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    /// Per-point class id in 0..k, -1 for unlabeled points.
    pub z_pc: Vec<i32>,
    /// Per-point instance id, globally unique across classes; -1 for noise,
    /// stuff, and unlabeled points.
    pub z_pi: Vec<i32>,
    /// Mean member feature per class (unnormalized "unit-ish" mean).
    pub class_repr: Vec<Vec<f32>>,
    pub is_thing: Vec<bool>,
    /// (eps, minPts) per class; None for stuff or singleton classes.
    pub per_class_params: Vec<Option<(f64, usize)>>,
    pub k: usize,
    pub seed: u64,
}

impl PseudoLabelSet {
    pub fn n_instances(&self) -> usize {
        self.z_pi.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize
    }
}

/// Knobs for [`derive_labels`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelParams {
    pub base_minpts: usize,
    pub eps_scale: f64,
    pub logit_scale: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        LabelParams {
            base_minpts: 4,
            eps_scale: 1.5,
            logit_scale: 100.0,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
        }
    }
}

/// Full pseudo-labeling: spherical k-means classes on the labeled points,
/// things/stuff tagging of class representatives, and per-class adaptive
/// DBSCAN instances for thing classes (stuff stays at z_pi = -1).
pub fn derive_labels(
    cloud: &PointCloud,
    field: &FeatureField,
    k: usize,
    provider: &dyn EmbeddingProvider,
    params: &LabelParams,
    seed: u64,
) -> Result<PseudoLabelSet> {
    if field.len() != cloud.len() {
        return Err(Error::argument("field and cloud sizes differ"));
    }
    if field.coverage() <= 0.0 {
        return Err(Error::argument("feature field has no labeled points"));
    }
    let n = cloud.len();
    let labeled: Vec<usize> = (0..n).filter(|&p| field.hit_count(p) >= 1).collect();
    if labeled.len() < k {
        return Err(Error::argument(format!(
            "need at least k={k} labeled points, have {}",
            labeled.len()
        )));
    }
    let dim = field.dim();
    let mut rows = Vec::with_capacity(labeled.len() * dim);
    for &p in &labeled {
        rows.extend(field.mean(p).expect("labeled point"));
    }
    let km = spherical_kmeans(
        &rows,
        dim,
        k,
        derive_seed(seed, "kmeans", 0),
        params.kmeans_max_iter,
        params.kmeans_tol,
    )?;

    let mut z_pc = vec![-1i32; n];
    for (li, &p) in labeled.iter().enumerate() {
        z_pc[p] = km.assignments[li] as i32;
    }

    // Class representatives: mean of member (mean) features.
    let mut class_repr: Vec<Vec<f32>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut sum = vec![0.0f64; dim];
        let mut count = 0usize;
        for (li, &p) in labeled.iter().enumerate() {
            if km.assignments[li] as usize == c {
                let mean = field.mean(p).expect("labeled point");
                for (s, x) in sum.iter_mut().zip(&mean) {
                    *s += *x as f64;
                }
                count += 1;
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            class_repr.push(sum.into_iter().map(|s| (s * inv) as f32).collect());
        } else {
            class_repr.push(vec![0.0; dim]);
        }
    }

    let mut is_thing = Vec::with_capacity(k);
    for repr in &class_repr {
        let mut unit = repr.clone();
        crate::embed::normalize_in_place(&mut unit);
        is_thing.push(matches!(
            things_stuff(&unit, provider, params.logit_scale)?,
            ThingStuff::Thing
        ));
    }

    // Per-class instances with a global id offset; ids ordered by class.
    let mut z_pi = vec![-1i32; n];
    let mut per_class_params: Vec<Option<(f64, usize)>> = vec![None; k];
    let mut next_instance = 0i32;
    for c in 0..k {
        if !is_thing[c] {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&p| z_pc[p] == c as i32).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() == 1 {
            // A singleton thing class is one real object.
            z_pi[members[0]] = next_instance;
            next_instance += 1;
            continue;
        }
        let positions: Vec<[f64; 3]> = members.iter().map(|&p| cloud.positions()[p]).collect();
        let (eps, min_pts) =
            class_density_params(&positions, params.base_minpts, params.eps_scale)?;
        per_class_params[c] = Some((eps, min_pts));
        let ids = adaptive_dbscan(&positions, eps, min_pts)?;
        let local_max = ids.iter().copied().max().unwrap_or(-1);
        for (mi, &p) in members.iter().enumerate() {
            if ids[mi] >= 0 {
                z_pi[p] = next_instance + ids[mi];
            }
        }
        next_instance += local_max + 1;
    }

    Ok(PseudoLabelSet {
        z_pc,
        z_pi,
        class_repr,
        is_thing,
        per_class_params,
        k,
        seed,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockProvider;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k1_centroid_is_normalized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 6;
        let n = 20;
        let rows: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let result = spherical_kmeans(&rows, dim, 1, 7, 50, 1e-9).unwrap();
        // Fixed point: centroid = normalize(sum of normalized rows).
        let data = normalize_rows(&rows, dim);
        let mut sum = vec![0.0f64; dim];
        for i in 0..n {
            for d in 0..dim {
                sum[d] += data[i * dim + d];
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for d in 0..dim {
            assert!((result.centroid(0)[d] - sum[d] / norm).abs() < 1e-9);
        }
        assert!(result.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn antipodal_bundles_are_separated_exactly() {
        // Two bundles around +e1 and -e1 with small noise; compare to the
        // brute-force best 2-partition by mean cosine.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 4;
        let n = 20;
        let mut rows = Vec::with_capacity(n * dim);
        for i in 0..n {
            let sign = if i < n / 2 { 1.0f32 } else { -1.0 };
            let mut v = vec![0.0f32; dim];
            v[0] = sign;
            for x in v.iter_mut().skip(1) {
                *x = rng.gen_range(-0.05..0.05);
            }
            rows.extend(v);
        }
        let result = spherical_kmeans(&rows, dim, 2, 11, 100, 1e-9).unwrap();

        // Oracle: enumerate all 2^(n-1)-1 proper bipartitions, maximize mean
        // cosine to per-side normalized mean.
        let data = normalize_rows(&rows, dim);
        let row = |i: usize| &data[i * dim..(i + 1) * dim];
        let side_score = |members: &[usize]| -> f64 {
            let mut sum = vec![0.0f64; dim];
            for &i in members {
                for d in 0..dim {
                    sum[d] += row(i)[d];
                }
            }
            // sum of cosines to normalized mean = |sum|
            sum.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let mut best_mask = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for mask in 1..(1usize << (n - 1)) {
            let mut a = vec![0usize; 0];
            let mut b = vec![0usize; 0];
            a.push(0);
            for i in 1..n {
                if mask & (1 << (i - 1)) != 0 {
                    a.push(i);
                } else {
                    b.push(i);
                }
            }
            if b.is_empty() {
                continue;
            }
            let score = (side_score(&a) + side_score(&b)) / n as f64;
            if score > best_score {
                best_score = score;
                best_mask = mask;
            }
        }
        let mut oracle_side = vec![false; n];
        for i in 1..n {
            oracle_side[i] = best_mask & (1 << (i - 1)) != 0;
        }
        oracle_side[0] = true;

        // k-means assignment must match the oracle partition (up to swap).
        let km_side: Vec<bool> = result.assignments.iter().map(|&a| a == 0).collect();
        let same = km_side == oracle_side;
        let swapped = km_side.iter().zip(&oracle_side).all(|(a, b)| a != b);
        assert!(same || swapped, "partition differs from brute-force optimum");
        assert!((result.inertia - best_score).abs() < 1e-9);
    }

    #[test]
    fn assignments_invariant_under_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let n = 50;
        let rows: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f32> = rows.iter().map(|x| x * 3.7).collect();
        let a = spherical_kmeans(&rows, dim, 4, 5, 60, 1e-9).unwrap();
        let b = spherical_kmeans(&scaled, dim, 4, 5, 60, 1e-9).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn inertia_is_monotone_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let dim = 5;
            let n = 80;
            let rows: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let result = spherical_kmeans(&rows, dim, 6, trial, 60, 0.0).unwrap();
            for w in result.inertia_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-12,
                    "inertia decreased: {} -> {} (trial {trial})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn kmeans_requires_enough_rows() {
        let rows = vec![1.0f32, 0.0, 0.0, 1.0];
        assert!(spherical_kmeans(&rows, 2, 3, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn dbscan_single_point_min_pts_one() {
        let labels = adaptive_dbscan(&[[0.0, 0.0, 0.0]], 1.0, 1).unwrap();
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn dbscan_isolated_point_is_noise() {
        let positions = vec![
            [0.0, 0.0, 0.0],
            [100.0, 0.0, 0.0],
            [100.1, 0.0, 0.0],
            [100.2, 0.0, 0.0],
            [100.05, 0.1, 0.0],
        ];
        let labels = adaptive_dbscan(&positions, 0.5, 4).unwrap();
        assert_eq!(labels[0], -1);
        assert!(labels[1..].iter().all(|&l| l == 0));
    }

    #[test]
    fn dbscan_two_blobs_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut positions = Vec::new();
        for _ in 0..40 {
            positions.push([
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]);
        }
        for _ in 0..40 {
            positions.push([
                10.0 + rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]);
        }
        let eps = 1.0; // blob separation is 10*eps
        let labels = adaptive_dbscan(&positions, eps, 4).unwrap();
        let want = reference::dbscan_reference(&positions, eps, 4);
        assert_eq!(labels, want);
        let n_clusters = labels.iter().copied().max().unwrap() + 1;
        assert_eq!(n_clusters, 2);
    }

    #[test]
    fn dbscan_matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = rng.gen_range(10..200);
            let positions: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    ]
                })
                .collect();
            let eps = rng.gen_range(0.3..1.5);
            let min_pts = rng.gen_range(1..8);
            let got = adaptive_dbscan(&positions, eps, min_pts).unwrap();
            let want = reference::dbscan_reference(&positions, eps, min_pts);
            assert_eq!(got, want, "trial {trial} eps={eps} min_pts={min_pts}");
        }
    }

    #[test]
    fn density_params_on_uniform_grid() {
        // 6x6x6 grid at 1 m spacing: median 4th-NN distance is 1 m.
        let mut positions = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    positions.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let (eps, _) = class_density_params(&positions, 4, 1.5).unwrap();
        assert!((eps - 1.5).abs() < 1e-9, "eps = {eps}");
    }

    #[test]
    fn density_params_minpts_log2() {
        let mut positions = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1024 {
            positions.push([
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
            ]);
        }
        let (_, min_pts) = class_density_params(&positions, 4, 1.5).unwrap();
        assert_eq!(min_pts, 10);
    }

    #[test]
    fn density_params_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let positions: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let doubled: Vec<[f64; 3]> = positions
            .iter()
            .map(|p| [p[0] * 2.0, p[1] * 2.0, p[2] * 2.0])
            .collect();
        let (eps1, mp1) = class_density_params(&positions, 4, 1.5).unwrap();
        let (eps2, mp2) = class_density_params(&doubled, 4, 1.5).unwrap();
        assert!((eps2 - 2.0 * eps1).abs() < 1e-9);
        assert_eq!(mp1, mp2);
    }

    #[test]
    fn density_params_singleton_is_an_error() {
        assert!(class_density_params(&[[0.0; 3]], 4, 1.5).is_err());
    }

    // --- derive_labels on a constructed scene ---

    use crate::embed::{STUFF_PROMPT, THING_PROMPT};

    const COLOR_A: [f32; 3] = [0.85, 0.15, 0.1];
    const COLOR_B: [f32; 3] = [0.2, 0.8, 0.2];

    fn mock() -> MockProvider {
        MockProvider::with_dim(
            77,
            vec![
                (COLOR_A, THING_PROMPT.to_string()),
                (COLOR_B, STUFF_PROMPT.to_string()),
                ([0.0, 0.0, 0.0], "a blank image".to_string()),
            ],
            64,
        )
    }

    /// 3 blobs of concept A (thing) + 1 region of concept B (stuff); features
    /// filled directly from the palette embeddings.
    fn constructed_scene(provider: &MockProvider) -> (PointCloud, FeatureField) {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        let blob_centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        for c in &blob_centers {
            for _ in 0..60 {
                positions.push([
                    c[0] + rng.gen_range(-0.5..0.5),
                    c[1] + rng.gen_range(-0.5..0.5),
                    c[2] + rng.gen_range(-0.5..0.5),
                ]);
                colors.push(COLOR_A);
            }
        }
        for i in 0..200 {
            positions.push([
                -20.0 + (i % 20) as f64 * 0.5,
                -20.0 + (i / 20) as f64 * 0.5,
                0.0,
            ]);
            colors.push(COLOR_B);
        }
        let cloud = PointCloud::new(positions, colors, None, None).unwrap();
        let va = provider.text_embed(THING_PROMPT).unwrap();
        let vb = provider.text_embed(STUFF_PROMPT).unwrap();
        let mut field = FeatureField::new(cloud.len(), provider.dim());
        for p in 0..cloud.len() {
            let v = if p < 180 { &va } else { &vb };
            field.accumulate(p, v);
        }
        (cloud, field)
    }

    #[test]
    fn derive_labels_recovers_concepts_and_instances() {
        let provider = mock();
        let (cloud, field) = constructed_scene(&provider);
        let labels =
            derive_labels(&cloud, &field, 2, &provider, &LabelParams::default(), 42).unwrap();

        // Two classes recovered, aligned with the construction.
        let class_of_a = labels.z_pc[0];
        let class_of_b = labels.z_pc[200];
        assert_ne!(class_of_a, class_of_b);
        for p in 0..180 {
            assert_eq!(labels.z_pc[p], class_of_a);
        }
        for p in 180..cloud.len() {
            assert_eq!(labels.z_pc[p], class_of_b);
        }
        assert!(labels.is_thing[class_of_a as usize]);
        assert!(!labels.is_thing[class_of_b as usize]);

        // Exactly 3 instances, all within concept A; stuff has none.
        assert_eq!(labels.n_instances(), 3);
        for p in 180..cloud.len() {
            assert_eq!(labels.z_pi[p], -1);
        }
        // Each blob maps to one distinct instance; sparse boundary points may
        // fall out as DBSCAN noise but never into another blob's instance.
        let mut per_blob = Vec::new();
        for b in 0..3 {
            let ids: std::collections::BTreeSet<i32> = labels.z_pi[b * 60..(b + 1) * 60]
                .iter()
                .copied()
                .filter(|&i| i >= 0)
                .collect();
            assert_eq!(ids.len(), 1, "blob {b} split into {ids:?}");
            let id = *ids.iter().next().unwrap();
            assert!(!per_blob.contains(&id));
            per_blob.push(id);
            let members = labels.z_pi[b * 60..(b + 1) * 60]
                .iter()
                .filter(|&&i| i == id)
                .count();
            assert!(members > 30, "blob {b} mostly noise ({members}/60)");
        }
    }

    #[test]
    fn derive_labels_degenerate_single_concept() {
        let provider = mock();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let positions: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let cloud =
            PointCloud::new(positions, vec![COLOR_A; 50], None, None).unwrap();
        let va = provider.text_embed(THING_PROMPT).unwrap();
        let mut field = FeatureField::new(cloud.len(), provider.dim());
        for p in 0..cloud.len() {
            field.accumulate(p, &va);
        }
        let labels =
            derive_labels(&cloud, &field, 1, &provider, &LabelParams::default(), 42).unwrap();
        assert!(labels.z_pc.iter().all(|&c| c == 0));
        assert!(labels.is_thing[0]);
        assert_eq!(labels.n_instances(), 1);
        assert!(labels.z_pi.iter().all(|&i| i == 0 || i == -1));
        let members = labels.z_pi.iter().filter(|&&i| i == 0).count();
        assert!(members > 25, "blob mostly noise ({members}/50)");
    }

    #[test]
    fn unlabeled_points_stay_masked() {
        let provider = mock();
        let (cloud, mut_field) = constructed_scene(&provider);
        let mut field = FeatureField::new(cloud.len(), provider.dim());
        // Copy only half the points' features over.
        for p in 0..cloud.len() / 2 {
            if let Some(mean) = mut_field.mean(p) {
                field.accumulate(p, &mean);
            }
        }
        let labels =
            derive_labels(&cloud, &field, 2, &provider, &LabelParams::default(), 42).unwrap();
        for p in cloud.len() / 2..cloud.len() {
            assert_eq!(labels.z_pc[p], -1);
            assert_eq!(labels.z_pi[p], -1);
        }
    }

    #[test]
    fn instance_ids_partition_thing_points() {
        let provider = mock();
        let (cloud, field) = constructed_scene(&provider);
        let labels =
            derive_labels(&cloud, &field, 2, &provider, &LabelParams::default(), 42).unwrap();
        // z_pi >= 0 only where z_pc >= 0 and the class is a thing.
        for p in 0..cloud.len() {
            if labels.z_pi[p] >= 0 {
                let c = labels.z_pc[p];
                assert!(c >= 0);
                assert!(labels.is_thing[c as usize]);
            }
        }
        // Ids are contiguous from 0.
        let max = labels.z_pi.iter().copied().max().unwrap();
        for id in 0..=max {
            assert!(labels.z_pi.iter().any(|&i| i == id));
        }
    }
}
