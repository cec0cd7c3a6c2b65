//! Stage-level orchestration shared by the CLI: one TOML config, one artifact
//! directory, a manifest per stage, and deterministic outputs for a given
//! (config, seed) pair.
//!
//! Artifact layout under `workdir`:
//!
//! ```text
//! scene.ply            (demo input; otherwise paths.cloud points elsewhere)
//! views/               view_XXXXX.ppm / .hdm1, poses.jsonl, poses_cov.jsonl
//! verdicts.jsonl       view filter outcomes
//! field.hff1           lifted per-point feature field
//! labels.ply           cloud + pc/pi extras
//! labels.json          per-class metadata, repr/class_XXX.hev1 refs
//! hierarchy/           superpoint levels + targets
//! model.hck1           trained parameters
//! losses.json          training loss trace
//! pred.ply             per-point cls/inst extras
//! pred_vecs.hff1       per-point predicted vectors
//! scores.json          evaluation output
//! query_<token>.ply    similarity export
//! <stage>.manifest.json
//! ```

use crate::cloud::{load_cloud_with_extras, save_cloud_with_extras, PointCloud};
use crate::embed::{
    classify_view, things_stuff, DirectoryProvider, EmbeddingProvider, FeatureMap, LabeledVec,
    MockProvider, ThingStuff,
};
use crate::error::{Error, Result};
use crate::lift::{
    coverage_loop, depth_screen, project_cloud, scatter_average, CoverageLoopParams,
    DepthMapRef, FeatureField, FilterParams,
};
use crate::moe::{forward, load_checkpoint, save_checkpoint, MoeConfig, ModelInputs, train_toy};
use crate::panoptic::{
    classify_points, cluster_instances, eval_oracle, eval_panoptic, eval_semantic, query_points,
    write_query_ply, QueryResult,
};
use crate::ply::{OutColumn, OutData, PlyFormat};
use crate::pseudolabel::{derive_labels, LabelParams, PseudoLabelSet};
use crate::render::{
    grid_rig, read_depth, splat_render, write_depth, write_ppm, write_pose_manifest, Intrinsics,
    PoseRecord, RenderedView,
};
use crate::superpoint::{
    build_hierarchy, load_hierarchy, propagate_targets, save_hierarchy, HierarchyConfig,
};
use crate::synthetic;
use crate::{derive_seed, embed};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// --- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: RawPaths,
    #[serde(default)]
    pub provider: RawProvider,
    #[serde(default)]
    pub render: RawRender,
    #[serde(default)]
    pub filter: RawFilter,
    #[serde(default)]
    pub lift: RawLift,
    #[serde(default)]
    pub label: RawLabel,
    #[serde(default)]
    pub superpoint: RawSuperpoint,
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub eval: RawEval,
    #[serde(default)]
    pub query: RawQuery,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawPaths {
    pub cloud: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    /// Directory of precomputed provider files (kind = "dir").
    pub provider_dir: Option<PathBuf>,
    /// Optional external HDM1 depth maps used for screening.
    pub depth_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub color: [f32; 3],
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawProvider {
    /// "mock" or "dir".
    pub kind: Option<String>,
    pub dim: Option<usize>,
    pub palette: Option<Vec<PaletteEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawRender {
    pub spacing: Option<f64>,
    pub margin: Option<f64>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub splat_px: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawFilter {
    pub positives: Option<Vec<String>>,
    pub negatives: Option<Vec<String>>,
    pub threshold: Option<f64>,
    pub logit_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawLift {
    pub tau_rel: Option<f64>,
    pub target_coverage: Option<f64>,
    pub max_rounds: Option<u32>,
    pub cube_radius: Option<f64>,
    pub base_minpts: Option<usize>,
    pub eps_scale: Option<f64>,
    pub points_per_cluster: Option<usize>,
    pub dump_correspondences: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawLabel {
    pub k: Option<usize>,
    pub eps_scale: Option<f64>,
    pub base_minpts: Option<usize>,
    pub logit_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawSuperpoint {
    pub levels: Option<usize>,
    pub lambdas: Option<Vec<f64>>,
    pub k_nn: Option<usize>,
    pub pos_weight: Option<f64>,
    pub color_weight: Option<f64>,
    pub target_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawModel {
    pub hidden_dim: Option<usize>,
    pub n_experts: Option<usize>,
    pub n_heads: Option<usize>,
    pub head_layers: Option<usize>,
    pub margin: Option<f64>,
    pub w_rec: Option<f64>,
    pub w_tri: Option<f64>,
    pub w_bal: Option<f64>,
    pub w_aff: Option<f64>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawEval {
    pub labels: Option<Vec<String>>,
    pub affinity_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RawQuery {
    pub threshold: Option<f64>,
}

/// Fully-resolved configuration; every field has a value and the keys that
/// fell back to defaults are recorded for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Config {
    pub seed: u64,
    pub cloud: PathBuf,
    pub workdir: PathBuf,
    pub provider_dir: Option<PathBuf>,
    pub depth_dir: Option<PathBuf>,
    pub provider_kind: String,
    pub provider_dim: usize,
    pub palette: Vec<PaletteEntry>,
    pub spacing: f64,
    pub margin: f64,
    pub intrinsics: Intrinsics,
    pub splat_px: u32,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub filter_threshold: f64,
    pub logit_scale: f64,
    pub tau_rel: f64,
    pub target_coverage: f64,
    pub max_rounds: u32,
    pub cube_radius: f64,
    pub lift_base_minpts: usize,
    pub lift_eps_scale: f64,
    pub points_per_cluster: usize,
    pub dump_correspondences: bool,
    pub k: usize,
    pub label_params: LabelParams,
    pub hierarchy: HierarchyConfig,
    pub model: MoeConfig,
    pub train_steps: usize,
    pub eval_labels: Vec<String>,
    pub affinity_threshold: f64,
    pub query_threshold: f64,
    #[serde(skip)]
    pub defaulted: Vec<String>,
}

fn pick<T>(value: Option<T>, default: T, key: &str, defaulted: &mut Vec<String>) -> T {
    match value {
        Some(v) => v,
        None => {
            defaulted.push(key.to_string());
            default
        }
    }
}

impl Config {
    pub fn resolve(raw: RawConfig) -> Result<Config> {
        let mut d = Vec::new();
        let seed = pick(raw.seed, 42, "seed", &mut d);
        let workdir = pick(raw.paths.workdir, PathBuf::from("out"), "paths.workdir", &mut d);
        let cloud = pick(
            raw.paths.cloud,
            workdir.join("scene.ply"),
            "paths.cloud",
            &mut d,
        );
        let provider_kind = pick(raw.provider.kind, "mock".into(), "provider.kind", &mut d);
        let provider_dim = pick(raw.provider.dim, 64, "provider.dim", &mut d);
        let palette = pick(
            raw.provider.palette,
            synthetic::demo_palette()
                .into_iter()
                .map(|(color, token)| PaletteEntry { color, token })
                .collect(),
            "provider.palette",
            &mut d,
        );
        let width = pick(raw.render.width, 256, "render.width", &mut d);
        let height = pick(raw.render.height, 256, "render.height", &mut d);
        let fx = pick(raw.render.fx, width as f64 / 2.0, "render.fx", &mut d);
        let fy = pick(raw.render.fy, fx, "render.fy", &mut d);
        let cx = pick(raw.render.cx, width as f64 / 2.0, "render.cx", &mut d);
        let cy = pick(raw.render.cy, height as f64 / 2.0, "render.cy", &mut d);
        let intrinsics = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intrinsics.validate()?;
        let model = MoeConfig {
            levels: pick(raw.superpoint.levels, 3, "superpoint.levels", &mut d),
            hidden_dim: pick(raw.model.hidden_dim, 16, "model.hidden_dim", &mut d),
            feature_dim: provider_dim,
            n_experts: pick(raw.model.n_experts, 4, "model.n_experts", &mut d),
            top_k: 2,
            n_heads: pick(raw.model.n_heads, 4, "model.n_heads", &mut d),
            head_layers: pick(raw.model.head_layers, 3, "model.head_layers", &mut d),
            margin: pick(raw.model.margin, 0.2, "model.margin", &mut d),
            w_rec: pick(raw.model.w_rec, 1.0, "model.w_rec", &mut d),
            w_tri: pick(raw.model.w_tri, 0.5, "model.w_tri", &mut d),
            w_bal: pick(raw.model.w_bal, 0.01, "model.w_bal", &mut d),
            w_aff: pick(raw.model.w_aff, 1.0, "model.w_aff", &mut d),
            learning_rate: pick(raw.model.learning_rate, 0.05, "model.learning_rate", &mut d),
            seed,
        };
        let hierarchy = HierarchyConfig {
            levels: model.levels,
            lambdas: pick(
                raw.superpoint.lambdas,
                vec![0.01, 0.1, 1.0],
                "superpoint.lambdas",
                &mut d,
            ),
            k_nn: pick(raw.superpoint.k_nn, 8, "superpoint.k_nn", &mut d),
            pos_weight: pick(raw.superpoint.pos_weight, 1.0, "superpoint.pos_weight", &mut d),
            color_weight: pick(
                raw.superpoint.color_weight,
                1.0,
                "superpoint.color_weight",
                &mut d,
            ),
            target_k: pick(raw.superpoint.target_k, 4, "superpoint.target_k", &mut d),
            seed,
        };
        if hierarchy.lambdas.len() < hierarchy.levels {
            return Err(Error::Config(format!(
                "superpoint.lambdas needs {} entries, got {}",
                hierarchy.levels,
                hierarchy.lambdas.len()
            )));
        }
        let config = Config {
            seed,
            cloud,
            workdir,
            provider_dir: raw.paths.provider_dir,
            depth_dir: raw.paths.depth_dir,
            provider_kind,
            provider_dim,
            palette,
            spacing: pick(raw.render.spacing, 8.0, "render.spacing", &mut d),
            margin: pick(raw.render.margin, 2.0, "render.margin", &mut d),
            intrinsics,
            splat_px: pick(raw.render.splat_px, 2, "render.splat_px", &mut d),
            positives: pick(
                raw.filter.positives,
                embed::DEFAULT_POSITIVE_PROMPTS.map(String::from).to_vec(),
                "filter.positives",
                &mut d,
            ),
            negatives: pick(
                raw.filter.negatives,
                embed::DEFAULT_NEGATIVE_PROMPTS.map(String::from).to_vec(),
                "filter.negatives",
                &mut d,
            ),
            filter_threshold: pick(raw.filter.threshold, 0.65, "filter.threshold", &mut d),
            logit_scale: pick(raw.filter.logit_scale, 100.0, "filter.logit_scale", &mut d),
            tau_rel: pick(raw.lift.tau_rel, 0.05, "lift.tau_rel", &mut d),
            target_coverage: pick(raw.lift.target_coverage, 0.9, "lift.target_coverage", &mut d),
            max_rounds: pick(raw.lift.max_rounds, 8, "lift.max_rounds", &mut d),
            cube_radius: pick(raw.lift.cube_radius, 3.0, "lift.cube_radius", &mut d),
            lift_base_minpts: pick(raw.lift.base_minpts, 4, "lift.base_minpts", &mut d),
            lift_eps_scale: pick(raw.lift.eps_scale, 3.0, "lift.eps_scale", &mut d),
            points_per_cluster: pick(
                raw.lift.points_per_cluster,
                2,
                "lift.points_per_cluster",
                &mut d,
            ),
            dump_correspondences: pick(
                raw.lift.dump_correspondences,
                false,
                "lift.dump_correspondences",
                &mut d,
            ),
            k: pick(raw.label.k, 32, "label.k", &mut d),
            label_params: LabelParams {
                base_minpts: pick(raw.label.base_minpts, 4, "label.base_minpts", &mut d),
                eps_scale: pick(raw.label.eps_scale, 1.5, "label.eps_scale", &mut d),
                logit_scale: pick(raw.label.logit_scale, 100.0, "label.logit_scale", &mut d),
                ..LabelParams::default()
            },
            hierarchy,
            model,
            train_steps: pick(raw.model.steps, 200, "model.steps", &mut d),
            eval_labels: pick(raw.eval.labels, synthetic::demo_label_set(), "eval.labels", &mut d),
            affinity_threshold: pick(
                raw.eval.affinity_threshold,
                0.5,
                "eval.affinity_threshold",
                &mut d,
            ),
            query_threshold: pick(raw.query.threshold, 0.5, "query.threshold", &mut d),
            defaulted: Vec::new(),
        };
        Ok(Config {
            defaulted: d,
            ..config
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(raw)
    }

    // Artifact paths.
    pub fn views_dir(&self) -> PathBuf {
        self.workdir.join("views")
    }
    pub fn poses_path(&self) -> PathBuf {
        self.views_dir().join("poses.jsonl")
    }
    pub fn cov_poses_path(&self) -> PathBuf {
        self.views_dir().join("poses_cov.jsonl")
    }
    pub fn verdicts_path(&self) -> PathBuf {
        self.workdir.join("verdicts.jsonl")
    }
    pub fn field_path(&self) -> PathBuf {
        self.workdir.join("field.hff1")
    }
    pub fn labels_ply_path(&self) -> PathBuf {
        self.workdir.join("labels.ply")
    }
    pub fn labels_json_path(&self) -> PathBuf {
        self.workdir.join("labels.json")
    }
    pub fn repr_dir(&self) -> PathBuf {
        self.workdir.join("repr")
    }
    pub fn hierarchy_dir(&self) -> PathBuf {
        self.workdir.join("hierarchy")
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.workdir.join("model.hck1")
    }
    pub fn losses_path(&self) -> PathBuf {
        self.workdir.join("losses.json")
    }
    pub fn pred_ply_path(&self) -> PathBuf {
        self.workdir.join("pred.ply")
    }
    pub fn pred_vecs_path(&self) -> PathBuf {
        self.workdir.join("pred_vecs.hff1")
    }
    pub fn scores_path(&self) -> PathBuf {
        self.workdir.join("scores.json")
    }

    pub fn build_provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        match self.provider_kind.as_str() {
            "mock" => {
                let palette: Vec<([f32; 3], String)> = self
                    .palette
                    .iter()
                    .map(|e| (e.color, e.token.clone()))
                    .collect();
                Ok(Box::new(MockProvider::with_dim(
                    derive_seed(self.seed, "provider", 0),
                    palette,
                    self.provider_dim,
                )))
            }
            "dir" => {
                let dir = self.provider_dir.as_ref().ok_or_else(|| {
                    Error::Config("provider.kind = \"dir\" needs paths.provider_dir".into())
                })?;
                Ok(Box::new(DirectoryProvider::open(dir)?))
            }
            other => Err(Error::Config(format!("unknown provider kind `{other}`"))),
        }
    }
}

// --- manifests ----------------------------------------------------------------

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(config: &Config, stage: &str, inputs: &[&Path]) -> Result<()> {
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    for path in inputs {
        if path.is_file() {
            hashes.insert(path.display().to_string(), sha256_file(path)?);
        }
    }
    let manifest = json!({
        "stage": stage,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "inputs": hashes,
        "config": serde_json::to_value(config).expect("config serializes"),
        "defaulted_keys": config.defaulted,
    });
    let path = config.workdir.join(format!("{stage}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            stage: produced_by.to_string(),
            missing: path.to_path_buf(),
        });
    }
    Ok(())
}

fn load_input_cloud(config: &Config) -> Result<PointCloud> {
    require(&config.cloud, "an input cloud (or `demo`)")?;
    crate::cloud::load_cloud(&config.cloud, None)
}

// --- stages --------------------------------------------------------------------

/// Render the grid rig: PPM + HDM1 per view plus the pose manifest.
pub fn stage_render(config: &Config) -> Result<serde_json::Value> {
    let cloud = load_input_cloud(config)?;
    std::fs::create_dir_all(config.views_dir())
        .map_err(|e| Error::io(config.views_dir(), e))?;
    let rig = grid_rig(&cloud, config.spacing, config.margin, config.intrinsics)?;
    let mut records = Vec::with_capacity(rig.poses.len());
    for (i, pose) in rig.poses.iter().enumerate() {
        let view_id = format!("view{i:05}");
        let view = splat_render(&cloud, pose, config.splat_px, view_id.clone());
        write_ppm(&view, &config.views_dir().join(format!("{view_id}.ppm")))?;
        write_depth(&view, &config.views_dir().join(format!("{view_id}.hdm1")))?;
        records.push(PoseRecord::from_pose(&view_id, pose));
    }
    write_pose_manifest(&records, &config.poses_path())?;
    write_manifest(config, "render", &[&config.cloud])?;
    Ok(json!({
        "stage": "render",
        "views": records.len(),
        "grid_points": rig.grid_points.len(),
        "degenerate": rig.degenerate,
    }))
}

fn rerender_views(
    config: &Config,
    cloud: &PointCloud,
    records: &[PoseRecord],
) -> Result<Vec<RenderedView>> {
    let poses: Vec<(String, crate::render::CameraPose)> = records
        .iter()
        .map(|r| r.to_pose().map(|p| (r.view_id.clone(), p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::par::map_slice(&poses, |(view_id, pose)| {
        splat_render(cloud, pose, config.splat_px, view_id.clone())
    }))
}

/// Classify every rendered view against the positive/negative prompts.
pub fn stage_filter(config: &Config) -> Result<serde_json::Value> {
    require(&config.poses_path(), "render")?;
    let cloud = load_input_cloud(config)?;
    let provider = config.build_provider()?;
    let records = crate::render::read_pose_manifest(&config.poses_path())?;
    let views = rerender_views(config, &cloud, &records)?;
    let positives: Vec<LabeledVec> = config
        .positives
        .iter()
        .map(|t| LabeledVec::embed(provider.as_ref(), t))
        .collect::<Result<Vec<_>>>()?;
    let negatives: Vec<LabeledVec> = config
        .negatives
        .iter()
        .map(|t| LabeledVec::embed(provider.as_ref(), t))
        .collect::<Result<Vec<_>>>()?;
    let mut kept = 0usize;
    let mut lines = Vec::new();
    for view in &views {
        let image_vec = provider.image_embed(view)?;
        let verdict = classify_view(
            &view.view_id,
            &image_vec,
            &positives,
            &negatives,
            config.filter_threshold,
            config.logit_scale,
        )?;
        kept += verdict.keep as usize;
        lines.push(serde_json::to_string(&verdict).expect("verdict serializes"));
    }
    std::fs::write(config.verdicts_path(), lines.join("\n") + "\n")
        .map_err(|e| Error::io(config.verdicts_path(), e))?;
    write_manifest(config, "filter", &[&config.cloud, &config.poses_path()])?;
    Ok(json!({
        "stage": "filter",
        "views": views.len(),
        "kept": kept,
    }))
}

fn read_verdicts(path: &Path) -> Result<Vec<crate::embed::ViewVerdict>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::parse(path, i as u64, format!("bad verdict: {e}")))?,
        );
    }
    Ok(out)
}

/// Lift pixel features into the cloud and run the coverage loop.
pub fn stage_lift(config: &Config) -> Result<serde_json::Value> {
    require(&config.poses_path(), "render")?;
    require(&config.verdicts_path(), "filter")?;
    let cloud = load_input_cloud(config)?;
    let provider = config.build_provider()?;
    let records = crate::render::read_pose_manifest(&config.poses_path())?;
    let verdicts = read_verdicts(&config.verdicts_path())?;
    let keep: BTreeMap<&str, bool> = verdicts
        .iter()
        .map(|v| (v.view_id.as_str(), v.keep))
        .collect();
    let kept_records: Vec<PoseRecord> = records
        .iter()
        .filter(|r| keep.get(r.view_id.as_str()).copied().unwrap_or(false))
        .cloned()
        .collect();
    let views = rerender_views(config, &cloud, &kept_records)?;

    // External depth maps take precedence over the built-in z-buffer.
    let external_depth: Option<Vec<(u32, u32, Vec<f32>)>> = match &config.depth_dir {
        Some(dir) => {
            let mut maps = Vec::with_capacity(views.len());
            for v in &views {
                let path = dir.join(format!("{}.hdm1", v.view_id));
                if !path.exists() {
                    return Err(Error::MissingDepth {
                        view_id: v.view_id.clone(),
                    });
                }
                maps.push(read_depth(&path)?);
            }
            Some(maps)
        }
        None => None,
    };
    let depth_refs: Vec<DepthMapRef> = match &external_depth {
        Some(maps) => views
            .iter()
            .zip(maps)
            .map(|(v, (h, w, data))| DepthMapRef {
                view_id: &v.view_id,
                width: *w,
                height: *h,
                data,
            })
            .collect(),
        None => views.iter().map(DepthMapRef::from_view).collect(),
    };

    let mut corrs = Vec::new();
    for (vi, view) in views.iter().enumerate() {
        corrs.extend(project_cloud(&cloud, view, vi as u32));
    }
    let screened = depth_screen(&corrs, &depth_refs, config.tau_rel)?;
    let maps: Vec<FeatureMap> = views
        .iter()
        .map(|v| provider.pixel_features(v))
        .collect::<Result<Vec<_>>>()?;
    let map_refs: Vec<&FeatureMap> = maps.iter().collect();
    let mut field = FeatureField::new(cloud.len(), provider.dim());
    scatter_average(&mut field, &screened, &map_refs)?;

    if config.dump_correspondences {
        let ids: Vec<&str> = views.iter().map(|v| v.view_id.as_str()).collect();
        crate::lift::write_correspondence_csv(
            &screened,
            &ids,
            &config.workdir.join("correspondences.csv"),
        )?;
    }
    drop(maps);

    let params = CoverageLoopParams {
        target_coverage: config.target_coverage,
        max_rounds: config.max_rounds,
        cube_radius: config.cube_radius,
        base_minpts: config.lift_base_minpts,
        eps_scale: config.lift_eps_scale,
        points_per_cluster: config.points_per_cluster,
        intrinsic: config.intrinsics,
        splat_px: config.splat_px,
        tau_rel: config.tau_rel,
        filter: FilterParams {
            positives: config.positives.clone(),
            negatives: config.negatives.clone(),
            threshold: config.filter_threshold,
            logit_scale: config.logit_scale,
        },
        seed: derive_seed(config.seed, "coverage-loop", 0),
    };
    let report = coverage_loop(&cloud, &mut field, provider.as_ref(), &params)?;
    let mut cov_records = Vec::new();
    for view in &report.added_views {
        write_ppm(view, &config.views_dir().join(format!("{}.ppm", view.view_id)))?;
        write_depth(view, &config.views_dir().join(format!("{}.hdm1", view.view_id)))?;
        cov_records.push(PoseRecord::from_pose(&view.view_id, &view.pose));
    }
    write_pose_manifest(&cov_records, &config.cov_poses_path())?;
    field.write(&config.field_path())?;
    write_manifest(
        config,
        "lift",
        &[&config.cloud, &config.poses_path(), &config.verdicts_path()],
    )?;
    Ok(json!({
        "stage": "lift",
        "initial_views": views.len(),
        "coverage": field.coverage(),
        "rounds_used": report.rounds_used,
        "added_views": report.added_views.len(),
    }))
}

/// Spherical k-means pseudo-classes and per-class DBSCAN pseudo-instances.
pub fn stage_label(config: &Config) -> Result<serde_json::Value> {
    require(&config.field_path(), "lift")?;
    let cloud = load_input_cloud(config)?;
    let provider = config.build_provider()?;
    let field = FeatureField::read(&config.field_path())?;
    let labels = derive_labels(
        &cloud,
        &field,
        config.k,
        provider.as_ref(),
        &config.label_params,
        derive_seed(config.seed, "labels", 0),
    )?;

    std::fs::create_dir_all(config.repr_dir()).map_err(|e| Error::io(config.repr_dir(), e))?;
    let mut class_meta = Vec::new();
    for (c, repr) in labels.class_repr.iter().enumerate() {
        let repr_rel = format!("repr/class_{c:03}.hev1");
        embed::write_embedding(repr, &config.workdir.join(&repr_rel))?;
        class_meta.push(json!({
            "class": c,
            "repr": repr_rel,
            "is_thing": labels.is_thing[c],
            "eps": labels.per_class_params[c].map(|(e, _)| e),
            "min_pts": labels.per_class_params[c].map(|(_, m)| m),
        }));
    }
    let sidecar = json!({
        "k": labels.k,
        "seed": labels.seed,
        "n_instances": labels.n_instances(),
        "classes": class_meta,
    });
    std::fs::write(
        config.labels_json_path(),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(config.labels_json_path(), e))?;
    save_cloud_with_extras(
        &cloud,
        &config.labels_ply_path(),
        PlyFormat::BinaryLittleEndian,
        &[
            OutColumn {
                name: "pc",
                data: OutData::I32(&labels.z_pc),
            },
            OutColumn {
                name: "pi",
                data: OutData::I32(&labels.z_pi),
            },
        ],
    )?;
    write_manifest(config, "label", &[&config.cloud, &config.field_path()])?;
    Ok(json!({
        "stage": "label",
        "k": labels.k,
        "instances": labels.n_instances(),
        "things": labels.is_thing.iter().filter(|&&t| t).count(),
    }))
}

/// Reload the pseudo-label set written by `stage_label`.
pub fn load_labels(config: &Config) -> Result<(PointCloud, PseudoLabelSet)> {
    require(&config.labels_ply_path(), "label")?;
    require(&config.labels_json_path(), "label")?;
    let (cloud, extras) = load_cloud_with_extras(&config.labels_ply_path(), None)?;
    let z_pc: Vec<i32> = extras
        .iter()
        .find(|c| c.name == "pc")
        .ok_or_else(|| Error::parse(&config.labels_ply_path(), 0, "missing pc property"))?
        .as_i64()
        .iter()
        .map(|&x| x as i32)
        .collect();
    let z_pi: Vec<i32> = extras
        .iter()
        .find(|c| c.name == "pi")
        .ok_or_else(|| Error::parse(&config.labels_ply_path(), 0, "missing pi property"))?
        .as_i64()
        .iter()
        .map(|&x| x as i32)
        .collect();
    let text = std::fs::read_to_string(config.labels_json_path())
        .map_err(|e| Error::io(config.labels_json_path(), e))?;
    let sidecar: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&config.labels_json_path(), 0, format!("bad sidecar: {e}")))?;
    let k = sidecar["k"].as_u64().unwrap_or(0) as usize;
    let seed = sidecar["seed"].as_u64().unwrap_or(0);
    let mut class_repr = Vec::with_capacity(k);
    let mut is_thing = Vec::with_capacity(k);
    let mut per_class_params = Vec::with_capacity(k);
    for c in sidecar["classes"].as_array().into_iter().flatten() {
        let repr_rel = c["repr"].as_str().unwrap_or_default();
        class_repr.push(embed::read_embedding(&config.workdir.join(repr_rel))?);
        is_thing.push(c["is_thing"].as_bool().unwrap_or(false));
        let eps = c["eps"].as_f64();
        let min_pts = c["min_pts"].as_u64();
        per_class_params.push(match (eps, min_pts) {
            (Some(e), Some(m)) => Some((e, m as usize)),
            _ => None,
        });
    }
    Ok((
        cloud,
        PseudoLabelSet {
            z_pc,
            z_pi,
            class_repr,
            is_thing,
            per_class_params,
            k,
            seed,
        },
    ))
}

/// Build the superpoint hierarchy and propagate the target vectors.
pub fn stage_partition(config: &Config) -> Result<serde_json::Value> {
    require(&config.field_path(), "lift")?;
    let (cloud, labels) = load_labels(config)?;
    let field = FeatureField::read(&config.field_path())?;
    let mut hierarchy = build_hierarchy(&cloud, &config.hierarchy)?;
    propagate_targets(
        &mut hierarchy,
        &field,
        &labels,
        config.hierarchy.target_k,
        derive_seed(config.seed, "targets", 0),
    )?;
    save_hierarchy(&hierarchy, &config.hierarchy_dir())?;
    write_manifest(
        config,
        "partition",
        &[&config.labels_ply_path(), &config.field_path()],
    )?;
    Ok(json!({
        "stage": "partition",
        "levels": hierarchy.depth(),
        "sizes": hierarchy.levels.iter().map(|l| l.n_superpoints).collect::<Vec<_>>(),
    }))
}

/// Train the toy model on the hierarchy targets.
pub fn stage_train(config: &Config) -> Result<serde_json::Value> {
    require(&config.hierarchy_dir().join("manifest.json"), "partition")?;
    let (_, labels) = load_labels(config)?;
    let hierarchy = load_hierarchy(&config.hierarchy_dir())?;
    let mut model_config = config.model.clone();
    model_config.levels = hierarchy.depth();
    model_config.feature_dim = hierarchy.feature_dim;
    let (params, trace) = train_toy(&hierarchy, &labels, &model_config, config.train_steps)?;
    save_checkpoint(&params, &config.checkpoint_path())?;
    let losses = serde_json::to_string_pretty(&trace).expect("trace serializes");
    std::fs::write(config.losses_path(), losses)
        .map_err(|e| Error::io(config.losses_path(), e))?;
    write_manifest(
        config,
        "train",
        &[
            &config.hierarchy_dir().join("manifest.json"),
            &config.labels_ply_path(),
        ],
    )?;
    Ok(json!({
        "stage": "train",
        "steps": config.train_steps,
        "first_total": trace.first().map(|l| l.total),
        "last_total": trace.last().map(|l| l.total),
    }))
}

/// Run the trained model and produce per-point predictions + instances.
pub fn stage_infer(config: &Config) -> Result<serde_json::Value> {
    require(&config.checkpoint_path(), "train")?;
    let (cloud, labels) = load_labels(config)?;
    let provider = config.build_provider()?;
    let hierarchy = load_hierarchy(&config.hierarchy_dir())?;
    let params = load_checkpoint(&config.checkpoint_path())?;
    let inputs = ModelInputs::from_hierarchy(&hierarchy, &labels)?;
    let (out, _) = forward(&params, &inputs, None, &[])?;

    let c = params.config.feature_dim;
    let s0 = inputs.n_level0();
    // Things/stuff per superpoint from the predicted vectors.
    let mut thing_mask = Vec::with_capacity(s0);
    for sp in 0..s0 {
        let vec: Vec<f32> = out.pred_vec[sp * c..(sp + 1) * c]
            .iter()
            .map(|&x| x as f32)
            .collect();
        thing_mask.push(matches!(
            things_stuff(&vec, provider.as_ref(), config.logit_scale)?,
            ThingStuff::Thing
        ));
    }
    let sp_instance = cluster_instances(
        s0,
        &hierarchy.levels[0].edges,
        &out.pred_affinity,
        config.affinity_threshold,
        &thing_mask,
    )?;

    // Broadcast to points through the level-0 partition.
    let n = cloud.len();
    let parent0 = &hierarchy.levels[0].parent_of;
    let mut point_vectors = vec![0.0f32; n * c];
    let mut point_instance = vec![-1i32; n];
    for p in 0..n {
        let sp = parent0[p] as usize;
        for j in 0..c {
            point_vectors[p * c + j] = out.pred_vec[sp * c + j] as f32;
        }
        point_instance[p] = sp_instance[sp];
    }
    let defined = vec![true; n];
    let point_class = classify_points(
        &point_vectors,
        c,
        &defined,
        &config.eval_labels,
        provider.as_ref(),
    )?;

    // Persist: vectors as an HFF1 field (hit = 1 everywhere), labels on a PLY.
    let mut pred_field = FeatureField::new(n, c);
    for p in 0..n {
        pred_field.accumulate(p, &point_vectors[p * c..(p + 1) * c]);
    }
    pred_field.write(&config.pred_vecs_path())?;
    save_cloud_with_extras(
        &cloud,
        &config.pred_ply_path(),
        PlyFormat::BinaryLittleEndian,
        &[
            OutColumn {
                name: "cls",
                data: OutData::I32(&point_class),
            },
            OutColumn {
                name: "inst",
                data: OutData::I32(&point_instance),
            },
        ],
    )?;
    let n_instances = sp_instance.iter().copied().max().map_or(0, |m| (m + 1).max(0));
    write_manifest(
        config,
        "infer",
        &[
            &config.checkpoint_path(),
            &config.labels_ply_path(),
            &config.hierarchy_dir().join("manifest.json"),
        ],
    )?;
    Ok(json!({
        "stage": "infer",
        "superpoints": s0,
        "instances": n_instances,
        "things": thing_mask.iter().filter(|&&t| t).count(),
    }))
}

/// Similarity query against the lifted field or the model predictions.
pub fn stage_query(
    config: &Config,
    text: &str,
    threshold: Option<f64>,
    source: QuerySource,
) -> Result<serde_json::Value> {
    let provider = config.build_provider()?;
    let threshold = threshold.unwrap_or(config.query_threshold);
    let (vectors, dim, defined, cloud) = match source {
        QuerySource::Field => {
            require(&config.field_path(), "lift")?;
            let cloud = load_input_cloud(config)?;
            let field = FeatureField::read(&config.field_path())?;
            let defined: Vec<bool> = (0..field.len()).map(|p| field.hit_count(p) >= 1).collect();
            (field.mean_matrix(), field.dim(), defined, cloud)
        }
        QuerySource::Predictions => {
            require(&config.pred_vecs_path(), "infer")?;
            let cloud = load_input_cloud(config)?;
            let field = FeatureField::read(&config.pred_vecs_path())?;
            let defined: Vec<bool> = (0..field.len()).map(|p| field.hit_count(p) >= 1).collect();
            (field.mean_matrix(), field.dim(), defined, cloud)
        }
    };
    let result: QueryResult =
        query_points(&vectors, dim, &defined, text, provider.as_ref(), threshold)?;
    let out_path = config
        .workdir
        .join(format!("query_{}.ply", embed::sanitize_token(text)));
    write_query_ply(&cloud, &result, threshold, &out_path, PlyFormat::BinaryLittleEndian)?;
    let in_mask = result.mask.iter().filter(|&&m| m).count();
    write_manifest(config, "query", &[&config.cloud])?;
    Ok(json!({
        "stage": "query",
        "text": text,
        "threshold": threshold,
        "points_in_mask": in_mask,
        "output": out_path.display().to_string(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Field,
    Predictions,
}

/// Evaluate predictions (and the preprocessing oracle) against ground truth.
pub fn stage_eval(config: &Config) -> Result<serde_json::Value> {
    let (cloud, labels) = load_labels(config)?;
    let provider = config.build_provider()?;
    let Some(gt_sem) = cloud.gt_semantic() else {
        return Err(Error::MissingPrerequisite {
            stage: "an input cloud with gt_sem labels".to_string(),
            missing: config.cloud.clone(),
        });
    };

    require(&config.pred_ply_path(), "infer")?;
    let (_, extras) = load_cloud_with_extras(&config.pred_ply_path(), None)?;
    let pred_class: Vec<i32> = extras
        .iter()
        .find(|c| c.name == "cls")
        .ok_or_else(|| Error::parse(&config.pred_ply_path(), 0, "missing cls property"))?
        .as_i64()
        .iter()
        .map(|&x| x as i32)
        .collect();
    let pred_instance: Vec<i32> = extras
        .iter()
        .find(|c| c.name == "inst")
        .ok_or_else(|| Error::parse(&config.pred_ply_path(), 0, "missing inst property"))?
        .as_i64()
        .iter()
        .map(|&x| x as i32)
        .collect();

    let n_classes = config.eval_labels.len();
    let semantic = eval_semantic(&pred_class, gt_sem, n_classes)?;
    let oracle = eval_oracle(&labels, gt_sem, &config.eval_labels, provider.as_ref())?;
    let panoptic = match cloud.gt_instance() {
        Some(gt_inst) if gt_inst.iter().any(|&i| i >= 0) => Some(eval_panoptic(
            &pred_class,
            &pred_instance,
            gt_sem,
            gt_inst,
            n_classes,
        )?),
        _ => None,
    };

    let scores = json!({
        "semantic": semantic,
        "oracle": oracle,
        "panoptic": panoptic,
    });
    std::fs::write(
        config.scores_path(),
        serde_json::to_string_pretty(&scores).expect("scores serialize"),
    )
    .map_err(|e| Error::io(config.scores_path(), e))?;
    write_manifest(
        config,
        "eval",
        &[&config.pred_ply_path(), &config.labels_ply_path()],
    )?;
    Ok(json!({
        "stage": "eval",
        "scores": scores,
        "output": config.scores_path().display().to_string(),
    }))
}

/// Configuration used by the built-in demo.
pub fn demo_config(workdir: &Path) -> Config {
    let raw = RawConfig {
        seed: Some(42),
        paths: RawPaths {
            cloud: Some(workdir.join("scene.ply")),
            workdir: Some(workdir.to_path_buf()),
            ..Default::default()
        },
        provider: RawProvider {
            kind: Some("mock".into()),
            dim: Some(64),
            palette: Some(
                synthetic::demo_palette()
                    .into_iter()
                    .map(|(color, token)| PaletteEntry { color, token })
                    .collect(),
            ),
        },
        render: RawRender {
            spacing: Some(8.0),
            margin: Some(2.0),
            width: Some(256),
            height: Some(256),
            splat_px: Some(2),
            ..Default::default()
        },
        filter: RawFilter {
            positives: Some(synthetic::demo_filter_prompts().0),
            negatives: Some(synthetic::demo_filter_prompts().1),
            threshold: Some(0.65),
            logit_scale: Some(100.0),
        },
        lift: RawLift {
            tau_rel: Some(0.05),
            target_coverage: Some(0.9),
            max_rounds: Some(10),
            cube_radius: Some(3.0),
            base_minpts: Some(4),
            eps_scale: Some(3.0),
            points_per_cluster: Some(2),
            dump_correspondences: Some(false),
        },
        label: RawLabel {
            k: Some(2),
            eps_scale: Some(1.5),
            base_minpts: Some(4),
            logit_scale: Some(100.0),
        },
        superpoint: RawSuperpoint {
            levels: Some(3),
            lambdas: Some(vec![0.02, 0.2, 2.0]),
            k_nn: Some(8),
            pos_weight: Some(1.0),
            color_weight: Some(4.0),
            target_k: Some(4),
        },
        model: RawModel {
            hidden_dim: Some(16),
            n_experts: Some(4),
            n_heads: Some(4),
            head_layers: Some(3),
            margin: Some(0.2),
            w_rec: Some(1.0),
            w_tri: Some(0.5),
            w_bal: Some(0.01),
            w_aff: Some(1.0),
            learning_rate: Some(0.05),
            steps: Some(200),
        },
        eval: RawEval {
            labels: Some(synthetic::demo_label_set()),
            affinity_threshold: Some(0.5),
        },
        query: RawQuery {
            threshold: Some(0.5),
        },
    };
    Config::resolve(raw).expect("demo config is valid")
}

/// Generate the synthetic scene and run every stage end to end.
pub fn stage_demo(workdir: &Path) -> Result<serde_json::Value> {
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let config = demo_config(workdir);
    let scene = synthetic::build_scene(&synthetic::SceneParams::default());
    crate::cloud::save_cloud(&scene, &config.cloud, PlyFormat::BinaryLittleEndian)?;
    // Persist the demo config so individual stages can be re-run against it.
    let toml_text = toml::to_string_pretty(&demo_raw_for_record(&config))
        .expect("demo config serializes");
    std::fs::write(workdir.join("demo_config.toml"), toml_text)
        .map_err(|e| Error::io(workdir.join("demo_config.toml"), e))?;

    let mut summary = Vec::new();
    summary.push(stage_render(&config)?);
    summary.push(stage_filter(&config)?);
    summary.push(stage_lift(&config)?);
    summary.push(stage_label(&config)?);
    summary.push(stage_partition(&config)?);
    summary.push(stage_train(&config)?);
    summary.push(stage_infer(&config)?);
    summary.push(stage_eval(&config)?);
    Ok(json!({
        "stage": "demo",
        "workdir": workdir.display().to_string(),
        "stages": summary,
    }))
}

fn demo_raw_for_record(config: &Config) -> RawConfig {
    RawConfig {
        seed: Some(config.seed),
        paths: RawPaths {
            cloud: Some(config.cloud.clone()),
            workdir: Some(config.workdir.clone()),
            provider_dir: config.provider_dir.clone(),
            depth_dir: config.depth_dir.clone(),
        },
        provider: RawProvider {
            kind: Some(config.provider_kind.clone()),
            dim: Some(config.provider_dim),
            palette: Some(config.palette.clone()),
        },
        render: RawRender {
            spacing: Some(config.spacing),
            margin: Some(config.margin),
            width: Some(config.intrinsics.width),
            height: Some(config.intrinsics.height),
            fx: Some(config.intrinsics.fx),
            fy: Some(config.intrinsics.fy),
            cx: Some(config.intrinsics.cx),
            cy: Some(config.intrinsics.cy),
            splat_px: Some(config.splat_px),
        },
        filter: RawFilter {
            positives: Some(config.positives.clone()),
            negatives: Some(config.negatives.clone()),
            threshold: Some(config.filter_threshold),
            logit_scale: Some(config.logit_scale),
        },
        lift: RawLift {
            tau_rel: Some(config.tau_rel),
            target_coverage: Some(config.target_coverage),
            max_rounds: Some(config.max_rounds),
            cube_radius: Some(config.cube_radius),
            base_minpts: Some(config.lift_base_minpts),
            eps_scale: Some(config.lift_eps_scale),
            points_per_cluster: Some(config.points_per_cluster),
            dump_correspondences: Some(config.dump_correspondences),
        },
        label: RawLabel {
            k: Some(config.k),
            eps_scale: Some(config.label_params.eps_scale),
            base_minpts: Some(config.label_params.base_minpts),
            logit_scale: Some(config.label_params.logit_scale),
        },
        superpoint: RawSuperpoint {
            levels: Some(config.hierarchy.levels),
            lambdas: Some(config.hierarchy.lambdas.clone()),
            k_nn: Some(config.hierarchy.k_nn),
            pos_weight: Some(config.hierarchy.pos_weight),
            color_weight: Some(config.hierarchy.color_weight),
            target_k: Some(config.hierarchy.target_k),
        },
        model: RawModel {
            hidden_dim: Some(config.model.hidden_dim),
            n_experts: Some(config.model.n_experts),
            n_heads: Some(config.model.n_heads),
            head_layers: Some(config.model.head_layers),
            margin: Some(config.model.margin),
            w_rec: Some(config.model.w_rec),
            w_tri: Some(config.model.w_tri),
            w_bal: Some(config.model.w_bal),
            w_aff: Some(config.model.w_aff),
            learning_rate: Some(config.model.learning_rate),
            steps: Some(config.train_steps),
        },
        eval: RawEval {
            labels: Some(config.eval_labels.clone()),
            affinity_threshold: Some(config.affinity_threshold),
        },
        query: RawQuery {
            threshold: Some(config.query_threshold),
        },
    }
}
