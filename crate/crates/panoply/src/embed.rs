//! Embedding providers: a uniform interface to text embeddings, whole-image
//! embeddings, and per-pixel feature maps, plus the view sanity filter and the
//! things/stuff discriminator.
//!
//! Real encoders run out of process; the [`DirectoryProvider`] reads their
//! precomputed outputs from disk. The [`MockProvider`] is a deterministic test
//! double keyed on a color palette.

use crate::error::{Error, Result};
use crate::render::RenderedView;
use crate::stable_hash;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Default positive prompts for the view sanity check.
pub const DEFAULT_POSITIVE_PROMPTS: [&str; 3] =
    ["a normal scene", "an indoor scene", "an outdoor scene"];

/// Default negative prompts for the view sanity check.
pub const DEFAULT_NEGATIVE_PROMPTS: [&str; 3] =
    ["an incoherent image", "unorganized, random points", "a blank image"];

/// Prompt pair for the things/stuff discriminator.
pub const THING_PROMPT: &str = "an object";
pub const STUFF_PROMPT: &str = "amorphous, uncountable stuff";

/// Per-pixel feature map, row-major height x width x dim.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let c = self.dim as usize;
        let idx = (v as usize * self.width as usize + u as usize) * c;
        &self.data[idx..idx + c]
    }
}

/// Uniform interface to the embedding backends. All returned vectors are
/// unit-norm (within 1e-5) and share one dimension per provider instance.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn text_embed(&self, token: &str) -> Result<Vec<f32>>;
    fn image_embed(&self, view: &RenderedView) -> Result<Vec<f32>>;
    fn pixel_features(&self, view: &RenderedView) -> Result<FeatureMap>;
}

pub fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Cosine similarity; inputs need not be unit-norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A text label together with its embedding.
#[derive(Debug, Clone)]
pub struct LabeledVec {
    pub label: String,
    pub vec: Vec<f32>,
}

impl LabeledVec {
    pub fn embed(provider: &dyn EmbeddingProvider, label: &str) -> Result<LabeledVec> {
        Ok(LabeledVec {
            label: label.to_string(),
            vec: provider.text_embed(label)?,
        })
    }
}

/// Verdict of the view sanity check.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ViewVerdict {
    pub view_id: String,
    pub keep: bool,
    pub best_label: String,
    pub probability: f64,
}

/// Joint softmax over all labels of `logit_scale * cosine(image, label)`.
/// Keep iff the most probable label is positive (strictly more probable than
/// every negative) and its probability strictly exceeds `threshold`.
pub fn classify_view(
    view_id: &str,
    image_vec: &[f32],
    positives: &[LabeledVec],
    negatives: &[LabeledVec],
    threshold: f64,
    logit_scale: f64,
) -> Result<ViewVerdict> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::argument(
            "classify_view needs at least one positive and one negative label",
        ));
    }
    if !(logit_scale > 0.0) {
        return Err(Error::argument("logit_scale must be positive"));
    }
    let logits: Vec<f64> = positives
        .iter()
        .chain(negatives.iter())
        .map(|l| logit_scale * cosine(image_vec, &l.vec))
        .collect();
    let probs = softmax(&logits);
    let npos = positives.len();
    let (best_pos, best_pos_p) = probs[..npos]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| {
            if p > acc.1 {
                (i, p)
            } else {
                acc
            }
        });
    let (best_neg, best_neg_p) = probs[npos..]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| {
            if p > acc.1 {
                (i, p)
            } else {
                acc
            }
        });
    // A positive/negative probability tie resolves to discard, which keeps the
    // verdict invariant under label reordering.
    let positive_wins = best_pos_p > best_neg_p;
    let (best_label, probability) = if positive_wins {
        (positives[best_pos].label.clone(), best_pos_p)
    } else {
        (negatives[best_neg].label.clone(), best_neg_p)
    };
    Ok(ViewVerdict {
        view_id: view_id.to_string(),
        keep: positive_wins && probability > threshold,
        best_label,
        probability,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThingStuff {
    Thing,
    Stuff,
}

/// Binary softmax between the "an object" and "amorphous, uncountable stuff"
/// prompt embeddings; an exact tie resolves to stuff.
pub fn things_stuff(
    class_vec: &[f32],
    provider: &dyn EmbeddingProvider,
    logit_scale: f64,
) -> Result<ThingStuff> {
    let thing_vec = provider.text_embed(THING_PROMPT)?;
    let stuff_vec = provider.text_embed(STUFF_PROMPT)?;
    let probs = softmax(&[
        logit_scale * cosine(class_vec, &thing_vec),
        logit_scale * cosine(class_vec, &stuff_vec),
    ]);
    Ok(if probs[0] > 0.5 {
        ThingStuff::Thing
    } else {
        ThingStuff::Stuff
    })
}

// --- mock provider ---------------------------------------------------------

/// Deterministic test double: each token embeds to a seeded-hash unit vector;
/// pixel features are the text vector of the palette concept nearest to each
/// pixel's color; the image embedding is the renormalized mean pixel feature.
pub struct MockProvider {
    seed: u64,
    dim: usize,
    palette: Vec<([f32; 3], String)>,
}

impl MockProvider {
    pub fn new(seed: u64, palette: Vec<([f32; 3], String)>) -> Self {
        Self::with_dim(seed, palette, 256)
    }

    pub fn with_dim(seed: u64, palette: Vec<([f32; 3], String)>, dim: usize) -> Self {
        assert!(dim >= 2);
        assert!(!palette.is_empty(), "mock provider needs a palette");
        MockProvider { seed, dim, palette }
    }

    fn token_vec(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ stable_hash(token.as_bytes()).rotate_left(17),
        );
        // Box-Muller; unit-normalized Gaussian vectors are uniform on the sphere.
        let mut v: Vec<f32> = Vec::with_capacity(self.dim);
        while v.len() < self.dim {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            v.push((r * theta.cos()) as f32);
            if v.len() < self.dim {
                v.push((r * theta.sin()) as f32);
            }
        }
        normalize_in_place(&mut v);
        v
    }

    fn nearest_concept(&self, color: &[f32; 3]) -> &str {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, (c, _)) in self.palette.iter().enumerate() {
            let d: f64 = (0..3).map(|a| ((c[a] - color[a]) as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        &self.palette[best].1
    }
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embed(&self, token: &str) -> Result<Vec<f32>> {
        Ok(self.token_vec(token))
    }

    fn image_embed(&self, view: &RenderedView) -> Result<Vec<f32>> {
        let mut mean = vec![0.0f64; self.dim];
        let mut cache: Vec<(&str, Vec<f32>)> = Vec::new();
        for px in &view.rgb {
            let concept = self.nearest_concept(px);
            let vec = match cache.iter().find(|(c, _)| *c == concept) {
                Some((_, v)) => v.clone(),
                None => {
                    let v = self.token_vec(concept);
                    cache.push((concept, v.clone()));
                    v
                }
            };
            for (m, x) in mean.iter_mut().zip(&vec) {
                *m += *x as f64;
            }
        }
        let inv = 1.0 / view.rgb.len() as f64;
        let mut out: Vec<f32> = mean.into_iter().map(|m| (m * inv) as f32).collect();
        normalize_in_place(&mut out);
        Ok(out)
    }

    fn pixel_features(&self, view: &RenderedView) -> Result<FeatureMap> {
        let mut cache: Vec<(&str, Vec<f32>)> = Vec::new();
        let mut data = Vec::with_capacity(view.rgb.len() * self.dim);
        for px in &view.rgb {
            let concept = self.nearest_concept(px);
            match cache.iter().find(|(c, _)| *c == concept) {
                Some((_, v)) => data.extend_from_slice(v),
                None => {
                    let v = self.token_vec(concept);
                    data.extend_from_slice(&v);
                    cache.push((concept, v));
                }
            }
        }
        Ok(FeatureMap {
            height: view.height(),
            width: view.width(),
            dim: self.dim as u32,
            data,
        })
    }
}

// --- file formats and the directory provider --------------------------------

/// Write a pixel-feature file: magic "HFM1", u32 height, width, dim
/// (little-endian), then height*width*dim float32, row-major.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(map.data.len() * 4 + 16);
    buf.extend_from_slice(b"HFM1");
    buf.extend_from_slice(&map.height.to_le_bytes());
    buf.extend_from_slice(&map.width.to_le_bytes());
    buf.extend_from_slice(&map.dim.to_le_bytes());
    for x in &map.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != b"HFM1" {
        return Err(Error::parse(path, 0, "not an HFM1 feature map"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let need = 16 + height as usize * width as usize * dim as usize * 4;
    if bytes.len() != need {
        return Err(Error::parse(path, bytes.len() as u64, "truncated feature map"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMap {
        height,
        width,
        dim,
        data,
    })
}

/// Write an embedding file: magic "HEV1", u32 dim, then dim float32.
pub fn write_embedding(vec: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(vec.len() * 4 + 8);
    buf.extend_from_slice(b"HEV1");
    buf.extend_from_slice(&(vec.len() as u32).to_le_bytes());
    for x in vec {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != b"HEV1" {
        return Err(Error::parse(path, 0, "not an HEV1 embedding file"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + dim * 4 {
        return Err(Error::parse(path, bytes.len() as u64, "truncated embedding"));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// File name used for a text token's embedding inside `<dir>/text/`.
pub fn sanitize_token(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Provider backed by a directory of precomputed files:
///
/// - `<dir>/<view_id>.hfm1` - per-pixel features of a view
/// - `<dir>/<view_id>.image.hev1` - whole-image embedding of a view
/// - `<dir>/text/<sanitized-token>.hev1` - text embeddings
pub struct DirectoryProvider {
    dir: PathBuf,
    dim: usize,
}

impl DirectoryProvider {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let mut dim = None;
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut names: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        for p in &names {
            match p.extension().and_then(|e| e.to_str()) {
                Some("hfm1") => {
                    dim = Some(read_feature_map(p)?.dim as usize);
                    break;
                }
                Some("hev1") => {
                    dim = Some(read_embedding(p)?.len());
                    break;
                }
                _ => {}
            }
        }
        if dim.is_none() {
            let text_dir = dir.join("text");
            if let Ok(entries) = std::fs::read_dir(&text_dir) {
                let mut names: Vec<PathBuf> =
                    entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                names.sort();
                if let Some(p) = names.iter().find(|p| {
                    p.extension().and_then(|e| e.to_str()) == Some("hev1")
                }) {
                    dim = Some(read_embedding(p)?.len());
                }
            }
        }
        match dim {
            Some(dim) => Ok(DirectoryProvider { dir, dim }),
            None => Err(Error::Config(format!(
                "provider directory {} holds no .hfm1/.hev1 files",
                dir.display()
            ))),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }
}

impl EmbeddingProvider for DirectoryProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embed(&self, token: &str) -> Result<Vec<f32>> {
        let path = self.dir.join("text").join(format!("{}.hev1", sanitize_token(token)));
        let v = read_embedding(&path)?;
        self.check_dim(v.len())?;
        Ok(v)
    }

    fn image_embed(&self, view: &RenderedView) -> Result<Vec<f32>> {
        let path = self.dir.join(format!("{}.image.hev1", view.view_id));
        let v = read_embedding(&path)?;
        self.check_dim(v.len())?;
        Ok(v)
    }

    fn pixel_features(&self, view: &RenderedView) -> Result<FeatureMap> {
        let path = self.dir.join(format!("{}.hfm1", view.view_id));
        let map = read_feature_map(&path)?;
        self.check_dim(map.dim as usize)?;
        if map.height != view.height() || map.width != view.width() {
            return Err(Error::Config(format!(
                "feature map {} is {}x{}, view {} is {}x{}",
                path.display(),
                map.height,
                map.width,
                view.view_id,
                view.height(),
                view.width()
            )));
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::render::{splat_render, CameraPose, Intrinsics};

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn lv(label: &str, vec: Vec<f32>) -> LabeledVec {
        LabeledVec {
            label: label.to_string(),
            vec,
        }
    }

    #[test]
    fn matching_positive_is_kept_with_high_probability() {
        let pos = vec![lv("good", unit(8, 0))];
        let neg = vec![lv("bad", unit(8, 1))];
        let verdict =
            classify_view("v", &unit(8, 0), &pos, &neg, 0.65, 100.0).unwrap();
        assert!(verdict.keep);
        assert_eq!(verdict.best_label, "good");
        assert!(verdict.probability > 0.9999);
        // softmax of logits (100, 0)
        let expect = 1.0 / (1.0 + (-100.0f64).exp());
        assert!((verdict.probability - expect).abs() < 1e-12);
    }

    #[test]
    fn equidistant_image_is_discarded() {
        let pos = vec![lv("good", unit(8, 0))];
        let neg = vec![lv("bad", unit(8, 1))];
        let mut image = vec![0.0f32; 8];
        image[0] = std::f32::consts::FRAC_1_SQRT_2;
        image[1] = std::f32::consts::FRAC_1_SQRT_2;
        let verdict = classify_view("v", &image, &pos, &neg, 0.65, 100.0).unwrap();
        assert!(!verdict.keep);
        assert!((verdict.probability - 0.5).abs() < 1e-9);
    }

    #[test]
    fn probability_at_threshold_is_discarded() {
        // Orthogonal positive and negative; probability is exactly 0.5 at
        // threshold 0.5 and the strict rule discards.
        let pos = vec![lv("good", unit(8, 0))];
        let neg = vec![lv("bad", unit(8, 1))];
        let image = unit(8, 2);
        let verdict = classify_view("v", &image, &pos, &neg, 0.5, 100.0).unwrap();
        assert!((verdict.probability - 0.5).abs() < 1e-12);
        assert!(!verdict.keep);
    }

    #[test]
    fn verdict_is_invariant_to_label_permutation() {
        let provider = MockProvider::with_dim(3, vec![([0.0; 3], "bg".into())], 64);
        let mut positives: Vec<LabeledVec> = ["a", "b", "c"]
            .iter()
            .map(|t| LabeledVec::embed(&provider, t).unwrap())
            .collect();
        let mut negatives: Vec<LabeledVec> = ["d", "e"]
            .iter()
            .map(|t| LabeledVec::embed(&provider, t).unwrap())
            .collect();
        let image = provider.text_embed("b").unwrap();
        let v1 = classify_view("v", &image, &positives, &negatives, 0.65, 100.0).unwrap();
        positives.reverse();
        negatives.reverse();
        let v2 = classify_view("v", &image, &positives, &negatives, 0.65, 100.0).unwrap();
        assert_eq!(v1.keep, v2.keep);
        assert_eq!(v1.best_label, v2.best_label);
        assert!((v1.probability - v2.probability).abs() < 1e-12);
    }

    #[test]
    fn empty_label_lists_are_an_error() {
        let pos = vec![lv("good", unit(4, 0))];
        assert!(classify_view("v", &unit(4, 0), &pos, &[], 0.65, 100.0).is_err());
        assert!(classify_view("v", &unit(4, 0), &[], &pos, 0.65, 100.0).is_err());
    }

    #[test]
    fn things_stuff_exact_matches() {
        let provider = MockProvider::with_dim(11, vec![([0.0; 3], "bg".into())], 128);
        let thing_vec = provider.text_embed(THING_PROMPT).unwrap();
        let stuff_vec = provider.text_embed(STUFF_PROMPT).unwrap();
        assert_eq!(
            things_stuff(&thing_vec, &provider, 100.0).unwrap(),
            ThingStuff::Thing
        );
        assert_eq!(
            things_stuff(&stuff_vec, &provider, 100.0).unwrap(),
            ThingStuff::Stuff
        );
    }

    #[test]
    fn things_stuff_tie_resolves_to_stuff() {
        struct TwoPrompt;
        impl EmbeddingProvider for TwoPrompt {
            fn dim(&self) -> usize {
                4
            }
            fn text_embed(&self, token: &str) -> Result<Vec<f32>> {
                Ok(match token {
                    THING_PROMPT => vec![1.0, 0.0, 0.0, 0.0],
                    _ => vec![0.0, 1.0, 0.0, 0.0],
                })
            }
            fn image_embed(&self, _view: &RenderedView) -> Result<Vec<f32>> {
                unreachable!()
            }
            fn pixel_features(&self, _view: &RenderedView) -> Result<FeatureMap> {
                unreachable!()
            }
        }
        // Orthogonal to both prompts: both cosines are 0, probability 0.5.
        let class_vec = vec![0.0, 0.0, 1.0, 0.0];
        assert_eq!(
            things_stuff(&class_vec, &TwoPrompt, 100.0).unwrap(),
            ThingStuff::Stuff
        );
    }

    #[test]
    fn mock_embeddings_are_deterministic_and_unit() {
        let provider = MockProvider::new(7, vec![([0.0; 3], "bg".into())]);
        let a = provider.text_embed("a crate").unwrap();
        let b = provider.text_embed("a crate").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn distinct_tokens_are_nearly_orthogonal() {
        let provider = MockProvider::new(13, vec![([0.0; 3], "bg".into())]);
        let tokens: Vec<String> = (0..100).map(|i| format!("token-{i}")).collect();
        let vecs: Vec<Vec<f32>> = tokens
            .iter()
            .map(|t| provider.text_embed(t).unwrap())
            .collect();
        for i in 0..tokens.len() {
            for j in (i + 1)..tokens.len() {
                let c = cosine(&vecs[i], &vecs[j]).abs();
                assert!(c < 0.5, "|cos| = {c} for pair ({i}, {j})");
            }
        }
    }

    fn solid_view(color: [f32; 3]) -> RenderedView {
        let k = Intrinsics {
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        };
        let mut extrinsic = [[0.0; 4]; 4];
        for (i, row) in extrinsic.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let pose = CameraPose::new(k, extrinsic).unwrap();
        RenderedView {
            view_id: "solid".into(),
            pose,
            rgb: vec![color; 256],
            depth: vec![1.0; 256],
        }
    }

    #[test]
    fn solid_color_pixels_equal_concept_embedding() {
        let red = [0.9, 0.1, 0.1];
        let provider = MockProvider::new(
            21,
            vec![(red, "a red thing".into()), ([0.0; 3], "background".into())],
        );
        let view = solid_view(red);
        let feats = provider.pixel_features(&view).unwrap();
        let concept = provider.text_embed("a red thing").unwrap();
        for v in 0..16 {
            for u in 0..16 {
                assert_eq!(feats.pixel(u, v), concept.as_slice());
            }
        }
        let image = provider.image_embed(&view).unwrap();
        for (a, b) in image.iter().zip(&concept) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = FeatureMap {
            height: 2,
            width: 3,
            dim: 4,
            data: (0..24).map(|i| i as f32 * 0.5).collect(),
        };
        let map_path = dir.path().join("v.hfm1");
        write_feature_map(&map, &map_path).unwrap();
        let back = read_feature_map(&map_path).unwrap();
        assert_eq!(back.data, map.data);
        assert_eq!((back.height, back.width, back.dim), (2, 3, 4));

        let vec_path = dir.path().join("t.hev1");
        let v: Vec<f32> = vec![0.25, -1.5, 3.0];
        write_embedding(&v, &vec_path).unwrap();
        assert_eq!(read_embedding(&vec_path).unwrap(), v);
    }

    #[test]
    fn directory_provider_reads_what_mock_writes() {
        let dir = tempfile::tempdir().unwrap();
        let red = [0.9f32, 0.1, 0.1];
        let mock = MockProvider::with_dim(5, vec![(red, "thing".into()), ([0.0; 3], "bg".into())], 32);

        let cloud = PointCloud::new(vec![[0.0, 0.0, 2.0]], vec![red], None, None).unwrap();
        let k = Intrinsics {
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
        };
        let mut extrinsic = [[0.0; 4]; 4];
        for (i, row) in extrinsic.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let pose = CameraPose::new(k, extrinsic).unwrap();
        let view = splat_render(&cloud, &pose, 2, "view00001");

        write_feature_map(
            &mock.pixel_features(&view).unwrap(),
            &dir.path().join("view00001.hfm1"),
        )
        .unwrap();
        write_embedding(
            &mock.image_embed(&view).unwrap(),
            &dir.path().join("view00001.image.hev1"),
        )
        .unwrap();
        std::fs::create_dir(dir.path().join("text")).unwrap();
        write_embedding(
            &mock.text_embed("thing").unwrap(),
            &dir.path().join("text").join(format!("{}.hev1", sanitize_token("thing"))),
        )
        .unwrap();

        let provider = DirectoryProvider::open(dir.path()).unwrap();
        assert_eq!(provider.dim(), 32);
        assert_eq!(
            provider.pixel_features(&view).unwrap().data,
            mock.pixel_features(&view).unwrap().data
        );
        assert_eq!(
            provider.image_embed(&view).unwrap(),
            mock.image_embed(&view).unwrap()
        );
        assert_eq!(
            provider.text_embed("thing").unwrap(),
            mock.text_embed("thing").unwrap()
        );
    }
}
