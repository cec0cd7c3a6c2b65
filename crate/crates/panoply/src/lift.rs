//! Lifting per-pixel features into the cloud: projection correspondences,
//! depth screening, scatter-averaging, and the recursive coverage loop.

use crate::cloud::PointCloud;
use crate::embed::{classify_view, EmbeddingProvider, FeatureMap, LabeledVec};
use crate::error::{Error, Result};
use crate::par;
use crate::pseudolabel::{adaptive_dbscan, class_density_params};
use crate::render::{cube_rig, splat_render, Intrinsics, Projection, RenderedView};
use crate::{derive_seed, Error as E};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

/// A point-to-pixel match in one view. `screen_depth` is the rendered (or
/// externally supplied) depth at the pixel; NaN until screened.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub point_index: u32,
    pub view_index: u32,
    pub u: u32,
    pub v: u32,
    pub point_depth: f64,
    pub screen_depth: f32,
}

/// Borrowed per-view depth map.
#[derive(Debug, Clone, Copy)]
pub struct DepthMapRef<'a> {
    pub view_id: &'a str,
    pub width: u32,
    pub height: u32,
    pub data: &'a [f32],
}

impl<'a> DepthMapRef<'a> {
    pub fn from_view(view: &'a RenderedView) -> Self {
        DepthMapRef {
            view_id: &view.view_id,
            width: view.width(),
            height: view.height(),
            data: &view.depth,
        }
    }
}

/// Project every cloud point through a view's pose; in-bounds hits become
/// correspondences (screen depth not yet filled).
pub fn project_cloud(
    cloud: &PointCloud,
    view: &RenderedView,
    view_index: u32,
) -> Vec<Correspondence> {
    let proj = par::map_slice(cloud.positions(), |p| {
        crate::render::project_point(&view.pose, p)
    });
    let mut out = Vec::new();
    for (i, pr) in proj.iter().enumerate() {
        if let Projection::Hit { u, v, depth } = *pr {
            out.push(Correspondence {
                point_index: i as u32,
                view_index,
                u: u.floor() as u32,
                v: v.floor() as u32,
                point_depth: depth,
                screen_depth: f32::NAN,
            });
        }
    }
    out
}

/// Keep a correspondence iff `point_depth <= screen_depth * (1 + tau_rel)`;
/// fills in `screen_depth` from the view's depth map.
pub fn depth_screen(
    correspondences: &[Correspondence],
    depths: &[DepthMapRef],
    tau_rel: f64,
) -> Result<Vec<Correspondence>> {
    if !(tau_rel > 0.0) {
        return Err(Error::argument("tau_rel must be > 0"));
    }
    let mut out = Vec::with_capacity(correspondences.len());
    for c in correspondences {
        let map = depths.get(c.view_index as usize).ok_or_else(|| E::MissingDepth {
            view_id: format!("#{}", c.view_index),
        })?;
        let idx = c.v as usize * map.width as usize + c.u as usize;
        let screen = *map.data.get(idx).ok_or_else(|| E::MissingDepth {
            view_id: map.view_id.to_string(),
        })?;
        if c.point_depth <= screen as f64 * (1.0 + tau_rel) {
            out.push(Correspondence {
                screen_depth: screen,
                ..*c
            });
        }
    }
    Ok(out)
}

/// Per-point accumulated feature vectors. Sums are kept in f64 so incremental
/// accumulation matches a one-shot average exactly (given the stored counts).
#[derive(Debug, Clone)]
pub struct FeatureField {
    dim: usize,
    sums: Vec<f64>,
    hits: Vec<u32>,
}

impl FeatureField {
    pub fn new(n_points: usize, dim: usize) -> Self {
        FeatureField {
            dim,
            sums: vec![0.0; n_points * dim],
            hits: vec![0; n_points],
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hit_count(&self, point: usize) -> u32 {
        self.hits[point]
    }

    pub fn hit_counts(&self) -> &[u32] {
        &self.hits
    }

    pub fn accumulate(&mut self, point: usize, vec: &[f32]) {
        assert_eq!(vec.len(), self.dim);
        let base = point * self.dim;
        for (s, x) in self.sums[base..base + self.dim].iter_mut().zip(vec) {
            *s += *x as f64;
        }
        self.hits[point] += 1;
    }

    /// Mean feature of a point, or None when it has no correspondence.
    pub fn mean(&self, point: usize) -> Option<Vec<f32>> {
        if self.hits[point] == 0 {
            return None;
        }
        let inv = 1.0 / self.hits[point] as f64;
        let base = point * self.dim;
        Some(
            self.sums[base..base + self.dim]
                .iter()
                .map(|s| (s * inv) as f32)
                .collect(),
        )
    }

    /// Dense matrix of mean features (zeros where undefined).
    pub fn mean_matrix(&self) -> Vec<f32> {
        let dim = self.dim;
        let mut out = vec![0.0f32; self.sums.len()];
        par::for_each_chunk_mut(&mut out, dim, |p, row| {
            if self.hits[p] > 0 {
                let inv = 1.0 / self.hits[p] as f64;
                let base = p * dim;
                for (o, s) in row.iter_mut().zip(&self.sums[base..base + dim]) {
                    *o = (s * inv) as f32;
                }
            }
        });
        out
    }

    /// Fraction of points with at least one correspondence.
    pub fn coverage(&self) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        self.hits.iter().filter(|&&h| h >= 1).count() as f64 / self.hits.len() as f64
    }

    /// Persist as "HFF1": u32 N, u32 C, then per point u32 hit count, then
    /// N*C float32 means (row-major), then N*C float64 sums.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.hits.len() * 4 + self.sums.len() * 12);
        buf.extend_from_slice(b"HFF1");
        buf.extend_from_slice(&(self.hits.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for h in &self.hits {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for s in &self.sums {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != b"HFF1" {
            return Err(Error::parse(path, 0, "not an HFF1 feature field"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + n * 4 + n * dim * 8;
        if bytes.len() != need {
            return Err(Error::parse(path, bytes.len() as u64, "truncated feature field"));
        }
        let mut hits = Vec::with_capacity(n);
        let mut off = 12;
        for _ in 0..n {
            hits.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut sums = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            sums.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        Ok(FeatureField { dim, sums, hits })
    }
}

/// Fraction of points with at least one correspondence.
pub fn coverage(field: &FeatureField) -> f64 {
    field.coverage()
}

/// Accumulate pixel features into the field. Correspondences are summed in a
/// canonical order (point, view, pixel) so the result is independent of input
/// order.
pub fn scatter_average(
    field: &mut FeatureField,
    correspondences: &[Correspondence],
    features: &[&FeatureMap],
) -> Result<()> {
    for map in features {
        if map.dim as usize != field.dim() {
            return Err(Error::DimMismatch {
                expected: field.dim(),
                got: map.dim as usize,
            });
        }
    }
    let mut order: Vec<usize> = (0..correspondences.len()).collect();
    order.sort_unstable_by_key(|&i| {
        let c = &correspondences[i];
        (c.point_index, c.view_index, c.v, c.u)
    });
    for i in order {
        let c = &correspondences[i];
        let map = features
            .get(c.view_index as usize)
            .ok_or_else(|| E::MissingDepth {
                view_id: format!("#{}", c.view_index),
            })?;
        field.accumulate(c.point_index as usize, map.pixel(c.u, c.v));
    }
    Ok(())
}

/// Filter prompts and decision knobs for the view sanity check.
#[derive(Debug, Clone)]
pub struct FilterParams {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub threshold: f64,
    pub logit_scale: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            positives: crate::embed::DEFAULT_POSITIVE_PROMPTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            negatives: crate::embed::DEFAULT_NEGATIVE_PROMPTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            threshold: 0.65,
            logit_scale: 100.0,
        }
    }
}

impl FilterParams {
    pub fn embed(&self, provider: &dyn EmbeddingProvider) -> Result<(Vec<LabeledVec>, Vec<LabeledVec>)> {
        let pos = self
            .positives
            .iter()
            .map(|t| LabeledVec::embed(provider, t))
            .collect::<Result<Vec<_>>>()?;
        let neg = self
            .negatives
            .iter()
            .map(|t| LabeledVec::embed(provider, t))
            .collect::<Result<Vec<_>>>()?;
        Ok((pos, neg))
    }
}

/// Knobs for [`coverage_loop`].
#[derive(Debug, Clone)]
pub struct CoverageLoopParams {
    pub target_coverage: f64,
    pub max_rounds: u32,
    pub cube_radius: f64,
    /// DBSCAN knobs for clustering the unmapped points.
    pub base_minpts: usize,
    pub eps_scale: f64,
    pub points_per_cluster: usize,
    pub intrinsic: Intrinsics,
    pub splat_px: u32,
    pub tau_rel: f64,
    pub filter: FilterParams,
    pub seed: u64,
}

impl Default for CoverageLoopParams {
    fn default() -> Self {
        CoverageLoopParams {
            target_coverage: 0.9,
            max_rounds: 8,
            cube_radius: 4.0,
            base_minpts: 4,
            eps_scale: 3.0,
            points_per_cluster: 2,
            intrinsic: Intrinsics::default(),
            splat_px: 2,
            tau_rel: 0.05,
            filter: FilterParams::default(),
            seed: 0,
        }
    }
}

/// Report of one coverage-completion run.
pub struct CoverageLoopReport {
    pub rounds_used: u32,
    pub final_coverage: f64,
    /// Views added by the loop (kept ones only), for persistence.
    pub added_views: Vec<RenderedView>,
}

/// Recursively photograph the unmapped points until coverage reaches the
/// target or the round budget runs out. Each round clusters the unmapped
/// points, draws `points_per_cluster` seeded-random points per cluster, casts
/// a cube rig per drawn point, filters the views, and lifts the survivors.
pub fn coverage_loop(
    cloud: &PointCloud,
    field: &mut FeatureField,
    provider: &dyn EmbeddingProvider,
    params: &CoverageLoopParams,
) -> Result<CoverageLoopReport> {
    if !(params.target_coverage > 0.0 && params.target_coverage <= 1.0) {
        return Err(Error::argument("target_coverage must be in (0, 1]"));
    }
    let (pos_labels, neg_labels) = params.filter.embed(provider)?;
    let mut added_views = Vec::new();
    let mut rounds_used = 0u32;

    for round in 0..params.max_rounds {
        if field.coverage() >= params.target_coverage {
            break;
        }
        let unmapped: Vec<usize> = (0..cloud.len())
            .filter(|&p| field.hit_count(p) == 0)
            .collect();
        if unmapped.is_empty() {
            break;
        }
        let positions: Vec<[f64; 3]> =
            unmapped.iter().map(|&p| cloud.positions()[p]).collect();

        // Cluster the unmapped points; density knobs derived from the set itself.
        let cluster_ids: Vec<i32> = if positions.len() == 1 {
            vec![0]
        } else {
            let (eps, min_pts) =
                class_density_params(&positions, params.base_minpts, params.eps_scale)?;
            adaptive_dbscan(&positions, eps, min_pts)?
        };
        let n_clusters = cluster_ids.iter().copied().max().map_or(0, |m| m + 1) as usize;
        if n_clusters == 0 {
            // All noise: nothing to photograph, and later rounds would see the
            // same set. Stop and report honestly.
            rounds_used = round;
            break;
        }

        rounds_used = round + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "coverage", round as u64));
        let mut draw_targets: Vec<[f64; 3]> = Vec::new();
        for cluster in 0..n_clusters {
            let members: Vec<usize> = (0..positions.len())
                .filter(|&i| cluster_ids[i] == cluster as i32)
                .collect();
            let take = params.points_per_cluster.min(members.len());
            let mut picks: Vec<usize> =
                members.choose_multiple(&mut rng, take).copied().collect();
            picks.sort_unstable();
            for i in picks {
                draw_targets.push(positions[i]);
            }
        }

        // Render cube rigs, filter, lift.
        let mut round_views = Vec::new();
        for (ti, target) in draw_targets.iter().enumerate() {
            let poses = cube_rig(*target, params.cube_radius, params.intrinsic)?;
            for (ci, pose) in poses.iter().enumerate() {
                let view_id = format!("cov{round:02}_t{ti:03}_c{ci}");
                round_views.push(splat_render(cloud, pose, params.splat_px, view_id));
            }
        }
        let mut kept = Vec::new();
        for view in round_views {
            let image_vec = provider.image_embed(&view)?;
            let verdict = classify_view(
                &view.view_id,
                &image_vec,
                &pos_labels,
                &neg_labels,
                params.filter.threshold,
                params.filter.logit_scale,
            )?;
            if verdict.keep {
                kept.push(view);
            }
        }
        if kept.is_empty() {
            continue;
        }

        let mut corrs = Vec::new();
        for (vi, view) in kept.iter().enumerate() {
            corrs.extend(project_cloud(cloud, view, vi as u32));
        }
        let depth_refs: Vec<DepthMapRef> = kept.iter().map(DepthMapRef::from_view).collect();
        let screened = depth_screen(&corrs, &depth_refs, params.tau_rel)?;
        let maps: Vec<FeatureMap> = kept
            .iter()
            .map(|v| provider.pixel_features(v))
            .collect::<Result<Vec<_>>>()?;
        let map_refs: Vec<&FeatureMap> = maps.iter().collect();
        scatter_average(field, &screened, &map_refs)?;
        added_views.extend(kept);
    }

    Ok(CoverageLoopReport {
        rounds_used,
        final_coverage: field.coverage(),
        added_views,
    })
}

/// Debug CSV dump of correspondences.
pub fn write_correspondence_csv(
    correspondences: &[Correspondence],
    view_ids: &[&str],
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    let _ = writeln!(buf, "point_index,view_id,u,v,point_depth,screen_depth");
    for c in correspondences {
        let view_id = view_ids
            .get(c.view_index as usize)
            .copied()
            .unwrap_or("?");
        let _ = writeln!(
            buf,
            "{},{},{},{},{},{}",
            c.point_index, view_id, c.u, c.v, c.point_depth, c.screen_depth
        );
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::embed::MockProvider;
    use crate::render::{CameraPose, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_pose(k: Intrinsics) -> CameraPose {
        let mut e = [[0.0; 4]; 4];
        for (i, row) in e.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraPose::new(k, e).unwrap()
    }

    fn small_intrinsics() -> Intrinsics {
        Intrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
        }
    }

    fn view_with_depth(depth_value: f32) -> RenderedView {
        let k = small_intrinsics();
        RenderedView {
            view_id: "v".into(),
            pose: identity_pose(k),
            rgb: vec![[0.0; 3]; 32 * 32],
            depth: vec![depth_value; 32 * 32],
        }
    }

    fn corr(point: u32, u: u32, v: u32, depth: f64) -> Correspondence {
        Correspondence {
            point_index: point,
            view_index: 0,
            u,
            v,
            point_depth: depth,
            screen_depth: f32::NAN,
        }
    }

    #[test]
    fn depth_screen_keeps_equal_depth() {
        let view = view_with_depth(1.0);
        let depths = [DepthMapRef::from_view(&view)];
        let kept = depth_screen(&[corr(0, 5, 5, 1.0)], &depths, 0.05).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].screen_depth, 1.0);
    }

    #[test]
    fn depth_screen_drops_occluded_point() {
        let view = view_with_depth(1.0);
        let depths = [DepthMapRef::from_view(&view)];
        let kept = depth_screen(&[corr(0, 5, 5, 2.0)], &depths, 0.05).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn depth_screen_missing_view_is_an_error() {
        let err = depth_screen(&[corr(0, 5, 5, 1.0)], &[], 0.05).unwrap_err();
        assert!(matches!(err, Error::MissingDepth { .. }));
    }

    #[test]
    fn two_plane_scene_keeps_only_front_plane() {
        // Points on z=1 and z=2 planes covering the same pixels head-on.
        let mut positions = Vec::new();
        let mut front = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let x = (i as f64 - 4.0) / 8.0;
                let y = (j as f64 - 4.0) / 8.0;
                front.push(positions.len());
                positions.push([x, y, 1.0]);
                positions.push([x * 2.0, y * 2.0, 2.0]); // same pixel at z=2
            }
        }
        let cloud = PointCloud::from_positions(positions.clone()).unwrap();
        let pose = identity_pose(small_intrinsics());
        let view = splat_render(&cloud, &pose, 0, "v");
        let corrs = project_cloud(&cloud, &view, 0);
        let depths = [DepthMapRef::from_view(&view)];
        let kept = depth_screen(&corrs, &depths, 0.05).unwrap();

        // Brute-force visibility: z=1 points are in front wherever both planes
        // project to the same pixel.
        let front_set: std::collections::HashSet<u32> =
            front.iter().map(|&i| i as u32).collect();
        assert!(!kept.is_empty());
        for c in &kept {
            assert!(
                front_set.contains(&c.point_index),
                "occluded point {} survived",
                c.point_index
            );
        }
        // Every front point that projected in-bounds must survive.
        let kept_set: std::collections::HashSet<u32> =
            kept.iter().map(|c| c.point_index).collect();
        for c in &corrs {
            if front_set.contains(&c.point_index) {
                assert!(kept_set.contains(&c.point_index));
            }
        }
    }

    fn map_of(dim: usize, fill: impl Fn(usize) -> Vec<f32>) -> FeatureMap {
        let (h, w) = (4u32, 4u32);
        let mut data = Vec::new();
        for i in 0..(h * w) as usize {
            let v = fill(i);
            assert_eq!(v.len(), dim);
            data.extend(v);
        }
        FeatureMap {
            height: h,
            width: w,
            dim: dim as u32,
            data,
        }
    }

    #[test]
    fn singleton_mean_is_the_pixel_vector() {
        let map = map_of(3, |_| vec![0.25, 0.5, -1.0]);
        let mut field = FeatureField::new(2, 3);
        let c = Correspondence {
            point_index: 1,
            view_index: 0,
            u: 2,
            v: 3,
            point_depth: 1.0,
            screen_depth: 1.0,
        };
        scatter_average(&mut field, &[c], &[&map]).unwrap();
        assert_eq!(field.hit_count(1), 1);
        assert_eq!(field.mean(1).unwrap(), vec![0.25, 0.5, -1.0]);
        assert_eq!(field.hit_count(0), 0);
        assert!(field.mean(0).is_none());
    }

    #[test]
    fn two_term_mean() {
        // Pixel (0,0) holds e1, pixel (1,0) holds e2.
        let map = map_of(4, |i| {
            let mut v = vec![0.0; 4];
            if i == 0 {
                v[0] = 1.0;
            } else {
                v[1] = 1.0;
            }
            v
        });
        let mut field = FeatureField::new(1, 4);
        let c0 = Correspondence {
            point_index: 0,
            view_index: 0,
            u: 0,
            v: 0,
            point_depth: 1.0,
            screen_depth: 1.0,
        };
        let c1 = Correspondence { u: 1, ..c0 };
        scatter_average(&mut field, &[c0, c1], &[&map]).unwrap();
        assert_eq!(field.mean(0).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn scatter_average_matches_accumulate_divide_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dim = 8;
        let n_points = 40;
        let map = map_of(dim, |i| {
            (0..dim).map(|d| ((i * 31 + d * 7) % 13) as f32 - 6.0).collect()
        });
        let corrs: Vec<Correspondence> = (0..500)
            .map(|_| Correspondence {
                point_index: rng.gen_range(0..n_points as u32),
                view_index: 0,
                u: rng.gen_range(0..4),
                v: rng.gen_range(0..4),
                point_depth: 1.0,
                screen_depth: 1.0,
            })
            .collect();
        let mut field = FeatureField::new(n_points, dim);
        scatter_average(&mut field, &corrs, &[&map]).unwrap();

        // Independent oracle: accumulate then divide, in input order, f64.
        let mut sums = vec![0.0f64; n_points * dim];
        let mut counts = vec![0u32; n_points];
        for c in &corrs {
            let px = map.pixel(c.u, c.v);
            for d in 0..dim {
                sums[c.point_index as usize * dim + d] += px[d] as f64;
            }
            counts[c.point_index as usize] += 1;
        }
        for p in 0..n_points {
            if counts[p] == 0 {
                assert_eq!(field.hit_count(p), 0);
                continue;
            }
            let mean = field.mean(p).unwrap();
            for d in 0..dim {
                let want = sums[p * dim + d] / counts[p] as f64;
                assert!(
                    (mean[d] as f64 - want).abs() < 1e-6,
                    "point {p} dim {d}: {} vs {want}",
                    mean[d]
                );
            }
        }
    }

    #[test]
    fn scatter_average_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dim = 5;
        let map = map_of(dim, |i| (0..dim).map(|d| (i + d) as f32 * 0.37 - 1.0).collect());
        let corrs: Vec<Correspondence> = (0..200)
            .map(|_| Correspondence {
                point_index: rng.gen_range(0..10),
                view_index: 0,
                u: rng.gen_range(0..4),
                v: rng.gen_range(0..4),
                point_depth: 1.0,
                screen_depth: 1.0,
            })
            .collect();
        let mut shuffled = corrs.clone();
        shuffled.shuffle(&mut rng);

        let mut f1 = FeatureField::new(10, dim);
        let mut f2 = FeatureField::new(10, dim);
        scatter_average(&mut f1, &corrs, &[&map]).unwrap();
        scatter_average(&mut f2, &shuffled, &[&map]).unwrap();
        for p in 0..10 {
            match (f1.mean(p), f2.mean(p)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(&b) {
                        assert!((x - y).abs() < 1e-6);
                    }
                }
                (None, None) => {}
                _ => panic!("hit counts diverged"),
            }
        }
    }

    #[test]
    fn scatter_average_rejects_dim_mismatch() {
        let map = map_of(3, |_| vec![0.0; 3]);
        let mut field = FeatureField::new(1, 4);
        let err = scatter_average(&mut field, &[], &[&map]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn coverage_fractions() {
        let mut field = FeatureField::new(4, 2);
        assert_eq!(coverage(&field), 0.0);
        field.accumulate(0, &[1.0, 0.0]);
        field.accumulate(1, &[1.0, 0.0]);
        field.accumulate(3, &[1.0, 0.0]);
        assert!((coverage(&field) - 0.75).abs() < 1e-12);
        field.accumulate(2, &[1.0, 0.0]);
        assert_eq!(coverage(&field), 1.0);
    }

    #[test]
    fn field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut field = FeatureField::new(3, 2);
        field.accumulate(0, &[1.0, 2.0]);
        field.accumulate(0, &[3.0, 4.0]);
        field.accumulate(2, &[-1.0, 0.5]);
        let path = dir.path().join("f.hff1");
        field.write(&path).unwrap();
        let back = FeatureField::read(&path).unwrap();
        assert_eq!(back.hit_counts(), field.hit_counts());
        assert_eq!(back.mean(0), field.mean(0));
        assert_eq!(back.mean(2), field.mean(2));
    }

    fn blob_cloud() -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut positions = Vec::new();
        for _ in 0..200 {
            positions.push([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        let colors = vec![[0.9, 0.1, 0.1]; 200];
        PointCloud::new(positions, colors, None, None).unwrap()
    }

    fn loop_params(seed: u64) -> CoverageLoopParams {
        CoverageLoopParams {
            target_coverage: 0.9,
            max_rounds: 4,
            // Close-up rigs: distant views of the small blob are mostly
            // background and the sanity filter rejects them.
            cube_radius: 1.5,
            base_minpts: 4,
            eps_scale: 3.0,
            points_per_cluster: 2,
            intrinsic: small_intrinsics(),
            splat_px: 2,
            tau_rel: 0.05,
            filter: FilterParams {
                positives: vec!["a red blob".into()],
                negatives: vec!["a blank image".into()],
                threshold: 0.65,
                logit_scale: 100.0,
            },
            seed,
        }
    }

    fn blob_provider() -> MockProvider {
        MockProvider::with_dim(
            41,
            vec![
                ([0.9, 0.1, 0.1], "a red blob".into()),
                ([0.0, 0.0, 0.0], "a blank image".into()),
            ],
            32,
        )
    }

    #[test]
    fn coverage_loop_early_exit_when_target_met() {
        let cloud = blob_cloud();
        let provider = blob_provider();
        let mut field = FeatureField::new(cloud.len(), 32);
        let v = provider.text_embed("a red blob").unwrap();
        for p in 0..cloud.len() {
            field.accumulate(p, &v);
        }
        let before = field.mean_matrix();
        let report = coverage_loop(&cloud, &mut field, &provider, &loop_params(1)).unwrap();
        assert_eq!(report.rounds_used, 0);
        assert!(report.added_views.is_empty());
        assert_eq!(field.mean_matrix(), before);
    }

    #[test]
    fn coverage_loop_zero_rounds_leaves_field_untouched() {
        let cloud = blob_cloud();
        let provider = blob_provider();
        let mut field = FeatureField::new(cloud.len(), 32);
        let mut params = loop_params(2);
        params.max_rounds = 0;
        let report = coverage_loop(&cloud, &mut field, &provider, &params).unwrap();
        assert_eq!(report.rounds_used, 0);
        assert_eq!(field.coverage(), 0.0);
    }

    #[test]
    fn coverage_loop_single_blob_bounded_pose_budget() {
        let cloud = blob_cloud();
        let provider = blob_provider();
        let mut field = FeatureField::new(cloud.len(), 32);
        let mut params = loop_params(3);
        params.max_rounds = 1;
        let report = coverage_loop(&cloud, &mut field, &provider, &params).unwrap();
        assert_eq!(report.rounds_used, 1);
        // One compact blob: one cluster, at most 2 drawn points, at most 16
        // poses; only kept views are reported.
        assert!(report.added_views.len() <= 16);
        assert!(field.coverage() > 0.0);
    }

    #[test]
    fn coverage_is_nondecreasing_across_rounds() {
        let cloud = blob_cloud();
        let provider = blob_provider();
        let mut field = FeatureField::new(cloud.len(), 32);
        let mut last = 0.0;
        for rounds in 1..=3 {
            let mut f = FeatureField::new(cloud.len(), 32);
            let mut params = loop_params(4);
            params.max_rounds = rounds;
            coverage_loop(&cloud, &mut f, &provider, &params).unwrap();
            let c = f.coverage();
            assert!(c >= last - 1e-12, "coverage dropped: {c} < {last}");
            last = c;
            field = f;
        }
        let _ = field;
    }
}
