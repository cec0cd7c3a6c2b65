//! Built-in synthetic scene: a flat ground region of one concept plus three
//! floating blobs of another, with ground-truth labels. The construction makes
//! the end-to-end expectations checkable: concepts map 1:1 to palette colors,
//! blobs are well separated, and the blobs float high enough that silhouette
//! pixels never pass depth screening against the ground.

use crate::cloud::PointCloud;
use crate::embed::{MockProvider, STUFF_PROMPT, THING_PROMPT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Blob (thing) color.
pub const COLOR_THING: [f32; 3] = [0.85, 0.15, 0.10];
/// Ground (stuff) color.
pub const COLOR_STUFF: [f32; 3] = [0.20, 0.80, 0.20];
/// Token assigned to empty-background pixels by the demo palette.
pub const SKY_TOKEN: &str = "open sky";

/// Ground-truth class ids of the demo scene.
pub const CLASS_THING: i32 = 0;
pub const CLASS_STUFF: i32 = 1;

#[derive(Debug, Clone)]
pub struct SceneParams {
    /// Ground square side length in meters.
    pub ground_extent: f64,
    /// Ground grid spacing in meters.
    pub ground_step: f64,
    pub blob_centers: Vec<[f64; 3]>,
    pub blob_radius: f64,
    pub blob_points: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            ground_extent: 36.0,
            ground_step: 0.45,
            blob_centers: vec![[8.0, 8.0, 3.0], [28.0, 10.0, 3.0], [18.0, 28.0, 3.0]],
            blob_radius: 1.2,
            blob_points: 300,
            seed: 424242,
        }
    }
}

impl SceneParams {
    /// A small variant for fast tests.
    pub fn tiny() -> Self {
        SceneParams {
            ground_extent: 12.0,
            ground_step: 0.5,
            blob_centers: vec![[3.0, 3.0, 2.0], [9.0, 4.0, 2.0], [6.0, 9.0, 2.0]],
            blob_radius: 1.0,
            blob_points: 120,
            seed: 424242,
        }
    }
}

/// Build the scene cloud with ground truth: blobs are class 0 with instance
/// ids 0..n_blobs, ground is class 1 with instance -1.
pub fn build_scene(params: &SceneParams) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut gt_sem = Vec::new();
    let mut gt_inst = Vec::new();

    for (bi, center) in params.blob_centers.iter().enumerate() {
        let mut placed = 0;
        while placed < params.blob_points {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r2: f64 = p.iter().map(|x| x * x).sum();
            if r2 > 1.0 {
                continue;
            }
            positions.push([
                center[0] + p[0] * params.blob_radius,
                center[1] + p[1] * params.blob_radius,
                center[2] + p[2] * params.blob_radius,
            ]);
            colors.push(COLOR_THING);
            gt_sem.push(CLASS_THING);
            gt_inst.push(bi as i32);
            placed += 1;
        }
    }

    let steps = (params.ground_extent / params.ground_step).round() as usize;
    for iy in 0..=steps {
        for ix in 0..=steps {
            positions.push([
                ix as f64 * params.ground_step,
                iy as f64 * params.ground_step,
                0.0,
            ]);
            colors.push(COLOR_STUFF);
            gt_sem.push(CLASS_STUFF);
            gt_inst.push(-1);
        }
    }

    PointCloud::new(positions, colors, Some(gt_sem), Some(gt_inst))
        .expect("constructed scene is valid")
}

/// Palette for the demo mock provider: blob color embeds as the things
/// prompt, ground as the stuff prompt, background as a neutral sky token (so
/// half-sky outdoor views are not mistaken for blank images).
pub fn demo_palette() -> Vec<([f32; 3], String)> {
    vec![
        (COLOR_THING, THING_PROMPT.to_string()),
        (COLOR_STUFF, STUFF_PROMPT.to_string()),
        ([0.0, 0.0, 0.0], SKY_TOKEN.to_string()),
    ]
}

/// Mock provider wired to the demo palette.
pub fn demo_provider(seed: u64, dim: usize) -> MockProvider {
    MockProvider::with_dim(seed, demo_palette(), dim)
}

/// View-filter prompts for the demo: scene concepts are positive, blankness
/// negative. The sky token is deliberately neither, so an empty view spreads
/// its probability mass and is discarded by the strict threshold.
pub fn demo_filter_prompts() -> (Vec<String>, Vec<String>) {
    (
        vec![THING_PROMPT.to_string(), STUFF_PROMPT.to_string()],
        vec!["a blank image".to_string()],
    )
}

/// Open-vocabulary label set used for demo evaluation, index-aligned with the
/// ground-truth class ids.
pub fn demo_label_set() -> Vec<String> {
    vec![THING_PROMPT.to_string(), STUFF_PROMPT.to_string()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_counts_and_labels_line_up() {
        let params = SceneParams::tiny();
        let cloud = build_scene(&params);
        let n_blob = params.blob_centers.len() * params.blob_points;
        let steps = (params.ground_extent / params.ground_step).round() as usize + 1;
        assert_eq!(cloud.len(), n_blob + steps * steps);
        let sem = cloud.gt_semantic().unwrap();
        let inst = cloud.gt_instance().unwrap();
        for i in 0..n_blob {
            assert_eq!(sem[i], CLASS_THING);
            assert_eq!(inst[i] as usize, i / params.blob_points);
        }
        for i in n_blob..cloud.len() {
            assert_eq!(sem[i], CLASS_STUFF);
            assert_eq!(inst[i], -1);
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let a = build_scene(&SceneParams::tiny());
        let b = build_scene(&SceneParams::tiny());
        assert_eq!(a.positions(), b.positions());
    }

    #[test]
    fn blobs_are_well_separated() {
        let params = SceneParams::default();
        for (i, a) in params.blob_centers.iter().enumerate() {
            for b in params.blob_centers.iter().skip(i + 1) {
                let d: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
                assert!(d > 6.0 * params.blob_radius);
            }
        }
    }
}
