//! Panoptic inference and evaluation: affinity-threshold instance clustering,
//! free-text similarity queries, class assignment by nearest text embedding,
//! and the PQ / mIoU / mAcc metrics (including the preprocessing-oracle mode).

use crate::cloud::PointCloud;
use crate::embed::{cosine, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::par;
use crate::ply::{OutColumn, OutData, PlyFormat};
use crate::pseudolabel::PseudoLabelSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-point panoptic prediction.
#[derive(Debug, Clone)]
pub struct PanopticPrediction {
    /// N x C semantic vectors (zeros where undefined).
    pub point_vectors: Vec<f32>,
    pub dim: usize,
    /// True where the point has a defined vector.
    pub defined: Vec<bool>,
    /// Class id in the supplied label set, -1 where unassigned.
    pub point_class: Vec<i32>,
    /// Instance id, -1 for stuff/noise.
    pub point_instance: Vec<i32>,
}

/// Connected components over edges whose affinity strictly exceeds the
/// threshold and whose endpoints are both things. Components are numbered by
/// their lowest superpoint index; stuff superpoints get -1.
pub fn cluster_instances(
    n_superpoints: usize,
    edges: &[(u32, u32)],
    affinities: &[f64],
    threshold: f64,
    thing_mask: &[bool],
) -> Result<Vec<i32>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::argument("affinity threshold must lie in (0, 1)"));
    }
    if edges.len() != affinities.len() {
        return Err(Error::argument("edge and affinity counts differ"));
    }
    let mut parent: Vec<u32> = (0..n_superpoints as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    for (qi, &(a, b)) in edges.iter().enumerate() {
        if affinities[qi] > threshold && thing_mask[a as usize] && thing_mask[b as usize] {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent[hi as usize] = lo;
            }
        }
    }
    let mut next = 0i32;
    let mut id_of_root: BTreeMap<u32, i32> = BTreeMap::new();
    let mut out = vec![-1i32; n_superpoints];
    for sp in 0..n_superpoints {
        if !thing_mask[sp] {
            continue;
        }
        let root = find(&mut parent, sp as u32);
        let id = *id_of_root.entry(root).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        out[sp] = id;
    }
    Ok(out)
}

/// Free-text similarity query over per-point vectors.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub similarity: Vec<f32>,
    pub mask: Vec<bool>,
}

pub fn query_points(
    vectors: &[f32],
    dim: usize,
    defined: &[bool],
    text: &str,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<QueryResult> {
    if provider.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: provider.dim(),
        });
    }
    let text_vec = provider.text_embed(text)?;
    let n = defined.len();
    let similarity: Vec<f32> = par::map_range(n, |p| {
        if defined[p] {
            cosine(&vectors[p * dim..(p + 1) * dim], &text_vec) as f32
        } else {
            0.0
        }
    });
    let mask = similarity
        .iter()
        .zip(defined)
        .map(|(&s, &def)| def && s as f64 > threshold)
        .collect();
    Ok(QueryResult { similarity, mask })
}

/// Assign each defined point the label with the highest cosine similarity;
/// exact ties take the lower label index; undefined points get -1.
pub fn classify_points(
    vectors: &[f32],
    dim: usize,
    defined: &[bool],
    labels: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<i32>> {
    if labels.is_empty() {
        return Err(Error::argument("label set must not be empty"));
    }
    let label_vecs: Vec<Vec<f32>> = labels
        .iter()
        .map(|l| provider.text_embed(l))
        .collect::<Result<Vec<_>>>()?;
    let n = defined.len();
    Ok(par::map_range(n, |p| {
        if !defined[p] {
            return -1;
        }
        let v = &vectors[p * dim..(p + 1) * dim];
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for (li, lv) in label_vecs.iter().enumerate() {
            let c = cosine(v, lv);
            if c > best_cos {
                best_cos = c;
                best = li;
            }
        }
        best as i32
    }))
}

// --- metrics --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSemantic {
    pub class: i32,
    pub iou: f64,
    pub recall: f64,
    pub present_in_gt: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticScores {
    /// Percentages in [0, 100].
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassSemantic>,
}

/// IoU / recall per class; means run over classes present in the ground
/// truth. Points with gt = -1 are ignored.
pub fn eval_semantic(pred: &[i32], gt: &[i32], n_classes: usize) -> Result<SemanticScores> {
    if pred.len() != gt.len() {
        return Err(Error::argument("prediction and gt lengths differ"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut gt_present = vec![false; n_classes];
    let mut any_gt = false;
    for (&p, &g) in pred.iter().zip(gt) {
        if g < 0 {
            continue;
        }
        any_gt = true;
        let g = g as usize;
        if g >= n_classes {
            return Err(Error::argument(format!("gt class {g} out of range")));
        }
        gt_present[g] = true;
        if p == g as i32 {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            if p >= 0 && (p as usize) < n_classes {
                fp[p as usize] += 1;
            }
        }
    }
    if !any_gt {
        return Err(Error::argument("no gt-labeled points to evaluate"));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut iou_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let denom = tp[c] + fp[c] + fn_[c];
        let iou = if denom > 0 { tp[c] as f64 / denom as f64 } else { 0.0 };
        let rdenom = tp[c] + fn_[c];
        let recall = if rdenom > 0 { tp[c] as f64 / rdenom as f64 } else { 0.0 };
        per_class.push(ClassSemantic {
            class: c as i32,
            iou: iou * 100.0,
            recall: recall * 100.0,
            present_in_gt: gt_present[c],
        });
        if gt_present[c] {
            iou_sum += iou;
            recall_sum += recall;
            present += 1;
        }
    }
    Ok(SemanticScores {
        miou: 100.0 * iou_sum / present as f64,
        macc: 100.0 * recall_sum / present as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPanoptic {
    pub class: i32,
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanopticScores {
    /// Percentages in [0, 100], averaged over classes present in gt.
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassPanoptic>,
}

/// Standard panoptic quality. Segments are (class, instance) groups; classes
/// without any gt instance id are treated as stuff and evaluated as single
/// segments. Matches require IoU strictly greater than 0.5 (unique by the
/// usual argument), PQ_c = sum TP IoU / (|TP| + |FP|/2 + |FN|/2).
pub fn eval_panoptic(
    pred_class: &[i32],
    pred_instance: &[i32],
    gt_class: &[i32],
    gt_instance: &[i32],
    n_classes: usize,
) -> Result<PanopticScores> {
    let n = pred_class.len();
    if [pred_instance.len(), gt_class.len(), gt_instance.len()] != [n, n, n] {
        return Err(Error::argument("array lengths differ"));
    }
    let semantic = eval_semantic(pred_class, gt_class, n_classes)?;

    // Things: classes with at least one gt instance id.
    let mut is_thing = vec![false; n_classes];
    for i in 0..n {
        if gt_class[i] >= 0 && gt_instance[i] >= 0 {
            is_thing[gt_class[i] as usize] = true;
        }
    }

    let mut per_class = Vec::with_capacity(n_classes);
    let mut pq_sum = 0.0;
    let mut rq_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        // Collect segments for this class. Points with gt = -1 are ignored on
        // the gt side but still count in pred segments (standard practice
        // approximated: unlabeled gt points carry no segment).
        let mut gt_segments: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        let mut pred_segments: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            if gt_class[i] == c as i32 {
                let key = if is_thing[c] { gt_instance[i] } else { 0 };
                if !is_thing[c] || gt_instance[i] >= 0 {
                    gt_segments.entry(key).or_default().push(i);
                }
            }
            if pred_class[i] == c as i32 {
                let key = if is_thing[c] { pred_instance[i] } else { 0 };
                // Thing-class points without an instance form no segment.
                if !is_thing[c] || pred_instance[i] >= 0 {
                    pred_segments.entry(key).or_default().push(i);
                }
            }
        }
        let gt_present = !gt_segments.is_empty();
        // IoU over the class's point sets; match at IoU > 0.5.
        let mut tp = 0usize;
        let mut iou_total = 0.0f64;
        let mut matched_pred: Vec<i32> = Vec::new();
        let mut matched_gt = 0usize;
        for (&gkey, gseg) in &gt_segments {
            let _ = gkey;
            let mut best: Option<(f64, i32)> = None;
            for (&pkey, pseg) in &pred_segments {
                let inter = intersection_size(gseg, pseg);
                if inter == 0 {
                    continue;
                }
                let union = gseg.len() + pseg.len() - inter;
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    best = Some((iou, pkey));
                    break; // unique by the IoU > 0.5 theorem
                }
            }
            if let Some((iou, pkey)) = best {
                tp += 1;
                iou_total += iou;
                matched_pred.push(pkey);
                matched_gt += 1;
            }
        }
        let fp = pred_segments
            .keys()
            .filter(|k| !matched_pred.contains(k))
            .count();
        let fn_ = gt_segments.len() - matched_gt;
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let (pq, rq, sq) = if denom > 0.0 {
            let rq = tp as f64 / denom;
            let sq = if tp > 0 { iou_total / tp as f64 } else { 0.0 };
            (rq * sq, rq, sq)
        } else {
            (0.0, 0.0, 0.0)
        };
        per_class.push(ClassPanoptic {
            class: c as i32,
            pq: pq * 100.0,
            rq: rq * 100.0,
            sq: sq * 100.0,
            tp,
            fp,
            fn_,
        });
        if gt_present {
            pq_sum += pq;
            rq_sum += rq;
            sq_sum += sq;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::argument("no gt segments to evaluate"));
    }
    Ok(PanopticScores {
        pq: 100.0 * pq_sum / present as f64,
        rq: 100.0 * rq_sum / present as f64,
        sq: 100.0 * sq_sum / present as f64,
        miou: semantic.miou,
        macc: semantic.macc,
        per_class,
    })
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    // Both lists are ascending by construction.
    let mut i = 0;
    let mut j = 0;
    let mut count = 0;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Preprocessing-oracle evaluation: classify each pipeline-labeled point by
/// the label embedding nearest to its class representative, then score with
/// [`eval_semantic`]. Points the pipeline left unlabeled are excluded; an
/// entirely unlabeled set is an error.
pub fn eval_oracle(
    labels: &PseudoLabelSet,
    gt: &[i32],
    label_set: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<SemanticScores> {
    if labels.z_pc.len() != gt.len() {
        return Err(Error::argument("label and gt lengths differ"));
    }
    if labels.z_pc.iter().all(|&c| c < 0) {
        return Err(Error::argument("no evaluable points: pipeline labeled nothing"));
    }
    let label_vecs: Vec<Vec<f32>> = label_set
        .iter()
        .map(|l| provider.text_embed(l))
        .collect::<Result<Vec<_>>>()?;
    // Class id per pseudo-class, by nearest label embedding.
    let class_of_pseudo: Vec<i32> = labels
        .class_repr
        .iter()
        .map(|repr| {
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for (li, lv) in label_vecs.iter().enumerate() {
                let c = cosine(repr, lv);
                if c > best_cos {
                    best_cos = c;
                    best = li;
                }
            }
            best as i32
        })
        .collect();
    let mut pred = Vec::with_capacity(gt.len());
    let mut gt_eval = Vec::with_capacity(gt.len());
    for (i, &z) in labels.z_pc.iter().enumerate() {
        if z < 0 {
            continue;
        }
        pred.push(class_of_pseudo[z as usize]);
        gt_eval.push(gt[i]);
    }
    eval_semantic(&pred, &gt_eval, label_set.len())
}

/// Export a query result as PLY: a per-point `sim` float property plus a
/// red-tinted color ramp above the threshold (natural colors below).
pub fn write_query_ply(
    cloud: &PointCloud,
    result: &QueryResult,
    threshold: f64,
    path: &Path,
    format: PlyFormat,
) -> Result<()> {
    let max_sim = result
        .similarity
        .iter()
        .zip(&result.mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s as f64)
        .fold(threshold, f64::max);
    let span = (max_sim - threshold).max(1e-6);
    let tinted = PointCloud::new(
        cloud.positions().to_vec(),
        cloud
            .colors()
            .iter()
            .zip(result.similarity.iter().zip(&result.mask))
            .map(|(c, (&s, &m))| {
                if m {
                    let t = (((s as f64 - threshold) / span).clamp(0.0, 1.0)) as f32;
                    [
                        c[0] + t * (1.0 - c[0]),
                        c[1] * (1.0 - t),
                        c[2] * (1.0 - t),
                    ]
                } else {
                    *c
                }
            })
            .collect(),
        cloud.gt_semantic().map(|s| s.to_vec()),
        cloud.gt_instance().map(|s| s.to_vec()),
    )?;
    crate::cloud::save_cloud_with_extras(
        &tinted,
        path,
        format,
        &[OutColumn {
            name: "sim",
            data: OutData::F32(&result.similarity),
        }],
    )
}
