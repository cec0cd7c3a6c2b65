//! Point-cloud data model, PLY I/O, and voxel subsampling.

use crate::error::{Error, Result};
use crate::ply::{self, ColumnData, OutColumn, OutData, PlyColumn, PlyFormat};
use std::collections::BTreeMap;
use std::path::Path;

/// A point cloud with per-point colors and optional ground-truth labels.
///
/// Invariants: all arrays share one length `N >= 1`, coordinates are finite,
/// colors lie in `[0, 1]` componentwise. Instance id `-1` means "none".
#[derive(Debug, Clone)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f32; 3]>,
    gt_semantic: Option<Vec<i32>>,
    gt_instance: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Vec<[f32; 3]>,
        gt_semantic: Option<Vec<i32>>,
        gt_instance: Option<Vec<i32>>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::argument("point cloud must contain at least one point"));
        }
        if colors.len() != n {
            return Err(Error::argument(format!(
                "colors length {} != positions length {n}",
                colors.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::argument(format!("non-finite coordinate at point {i}")));
            }
        }
        for (i, c) in colors.iter().enumerate() {
            if !c.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)) {
                return Err(Error::argument(format!("color out of [0,1] at point {i}")));
            }
        }
        for labels in [&gt_semantic, &gt_instance].into_iter().flatten() {
            if labels.len() != n {
                return Err(Error::argument("label array length mismatch"));
            }
        }
        Ok(PointCloud {
            positions,
            colors,
            gt_semantic,
            gt_instance,
        })
    }

    /// Uniform mid-gray colors.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![[0.5, 0.5, 0.5]; n], None, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn gt_semantic(&self) -> Option<&[i32]> {
        self.gt_semantic.as_deref()
    }

    pub fn gt_instance(&self) -> Option<&[i32]> {
        self.gt_instance.as_deref()
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Load a cloud from PLY. When `format` is given, the file header must match.
pub fn load_cloud(path: &Path, format: Option<PlyFormat>) -> Result<PointCloud> {
    load_cloud_with_extras(path, format).map(|(c, _)| c)
}

/// Like [`load_cloud`] but also returns any non-standard vertex columns
/// (anything besides x/y/z, colors, and the two gt label properties).
pub fn load_cloud_with_extras(
    path: &Path,
    format: Option<PlyFormat>,
) -> Result<(PointCloud, Vec<PlyColumn>)> {
    let data = ply::read_ply(path)?;
    if let Some(expected) = format {
        if data.format != expected {
            return Err(Error::parse(
                path,
                0,
                format!("expected {expected:?} file, found {:?}", data.format),
            ));
        }
    }

    let coord = |name: &str| -> Result<Vec<f64>> {
        data.column(name)
            .map(|c| c.as_f64())
            .ok_or_else(|| Error::parse(path, 0, format!("missing vertex property `{name}`")))
    };
    let xs = coord("x")?;
    let ys = coord("y")?;
    let zs = coord("z")?;
    let positions: Vec<[f64; 3]> = (0..data.count).map(|i| [xs[i], ys[i], zs[i]]).collect();

    let color_channel = |name: &str| -> Result<Option<Vec<f32>>> {
        let Some(col) = data.column(name) else {
            return Ok(None);
        };
        let vals: Vec<f32> = match (&col.data, col.ty) {
            (ColumnData::Int(v), ply::ScalarType::U8) => {
                v.iter().map(|&x| x as f32 / 255.0).collect()
            }
            (ColumnData::Int(v), ply::ScalarType::U16) => {
                v.iter().map(|&x| x as f32 / 65535.0).collect()
            }
            (ColumnData::Float(v), _) => v.iter().map(|&x| x as f32).collect(),
            _ => {
                return Err(Error::parse(
                    path,
                    0,
                    format!("unsupported color property type for `{name}`"),
                ));
            }
        };
        for (i, v) in vals.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::parse(
                    path,
                    0,
                    format!("color `{name}` out of [0,1] at row {i}"),
                ));
            }
        }
        Ok(Some(vals))
    };
    let r = color_channel("red")?;
    let g = color_channel("green")?;
    let b = color_channel("blue")?;
    let colors: Vec<[f32; 3]> = match (r, g, b) {
        (Some(r), Some(g), Some(b)) => (0..data.count).map(|i| [r[i], g[i], b[i]]).collect(),
        (None, None, None) => vec![[0.5, 0.5, 0.5]; data.count],
        _ => {
            return Err(Error::parse(path, 0, "incomplete color properties"));
        }
    };

    let labels = |name: &str| -> Option<Vec<i32>> {
        data.column(name).map(|c| c.as_i64().iter().map(|&x| x as i32).collect())
    };
    let gt_semantic = labels("gt_sem");
    let gt_instance = labels("gt_inst");

    let known = ["x", "y", "z", "red", "green", "blue", "gt_sem", "gt_inst"];
    let extras: Vec<PlyColumn> = data
        .columns
        .iter()
        .filter(|c| !known.contains(&c.name.as_str()))
        .cloned()
        .collect();

    let cloud = PointCloud::new(positions, colors, gt_semantic, gt_instance)?;
    Ok((cloud, extras))
}

/// Save a cloud as PLY. Positions are written as doubles and colors as floats
/// so that a binary round trip is bit-exact.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    save_cloud_with_extras(cloud, path, format, &[])
}

pub fn save_cloud_with_extras(
    cloud: &PointCloud,
    path: &Path,
    format: PlyFormat,
    extras: &[OutColumn],
) -> Result<()> {
    let n = cloud.len();
    let xs: Vec<f64> = cloud.positions.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = cloud.positions.iter().map(|p| p[1]).collect();
    let zs: Vec<f64> = cloud.positions.iter().map(|p| p[2]).collect();
    let r: Vec<f32> = cloud.colors.iter().map(|c| c[0]).collect();
    let g: Vec<f32> = cloud.colors.iter().map(|c| c[1]).collect();
    let b: Vec<f32> = cloud.colors.iter().map(|c| c[2]).collect();

    let mut cols: Vec<OutColumn> = vec![
        OutColumn { name: "x", data: OutData::F64(&xs) },
        OutColumn { name: "y", data: OutData::F64(&ys) },
        OutColumn { name: "z", data: OutData::F64(&zs) },
        OutColumn { name: "red", data: OutData::F32(&r) },
        OutColumn { name: "green", data: OutData::F32(&g) },
        OutColumn { name: "blue", data: OutData::F32(&b) },
    ];
    if let Some(sem) = &cloud.gt_semantic {
        cols.push(OutColumn { name: "gt_sem", data: OutData::I32(sem) });
    }
    if let Some(inst) = &cloud.gt_instance {
        cols.push(OutColumn { name: "gt_inst", data: OutData::I32(inst) });
    }
    for e in extras {
        assert_eq!(e.data_len(), n, "extra column `{}` length mismatch", e.name);
        cols.push(OutColumn { name: e.name, data: e.data_ref() });
    }
    ply::write_ply(path, format, &cols)
}

impl OutColumn<'_> {
    fn data_len(&self) -> usize {
        match &self.data {
            OutData::F32(v) => v.len(),
            OutData::F64(v) => v.len(),
            OutData::I32(v) => v.len(),
            OutData::U8(v) => v.len(),
        }
    }

    fn data_ref(&self) -> OutData<'_> {
        match &self.data {
            OutData::F32(v) => OutData::F32(v),
            OutData::F64(v) => OutData::F64(v),
            OutData::I32(v) => OutData::I32(v),
            OutData::U8(v) => OutData::U8(v),
        }
    }
}

/// One representative point per occupied voxel: centroid position, mean color,
/// majority-vote labels (ties resolved to the smallest label id). Output is
/// sorted by voxel index for determinism.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::argument(format!("voxel size must be > 0, got {voxel}")));
    }
    let (lo, _) = cloud.bounding_box();
    let mut groups: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = (
            ((p[0] - lo[0]) / voxel).floor() as i64,
            ((p[1] - lo[1]) / voxel).floor() as i64,
            ((p[2] - lo[2]) / voxel).floor() as i64,
        );
        groups.entry(key).or_default().push(i);
    }

    let mut positions = Vec::with_capacity(groups.len());
    let mut colors = Vec::with_capacity(groups.len());
    let mut sem = cloud.gt_semantic.as_ref().map(|_| Vec::with_capacity(groups.len()));
    let mut inst = cloud.gt_instance.as_ref().map(|_| Vec::with_capacity(groups.len()));

    for members in groups.values() {
        let inv = 1.0 / members.len() as f64;
        let mut pos = [0.0f64; 3];
        let mut col = [0.0f64; 3];
        for &i in members {
            for a in 0..3 {
                pos[a] += cloud.positions[i][a];
                col[a] += cloud.colors[i][a] as f64;
            }
        }
        positions.push([pos[0] * inv, pos[1] * inv, pos[2] * inv]);
        colors.push([
            (col[0] * inv) as f32,
            (col[1] * inv) as f32,
            (col[2] * inv) as f32,
        ]);
        if let (Some(out), Some(src)) = (&mut sem, &cloud.gt_semantic) {
            out.push(majority_label(members, src));
        }
        if let (Some(out), Some(src)) = (&mut inst, &cloud.gt_instance) {
            out.push(majority_label(members, src));
        }
    }
    // Mean of in-range values stays in range; clamp only against fp drift.
    for c in &mut colors {
        for x in c.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
    PointCloud::new(positions, colors, sem, inst)
}

fn majority_label(members: &[usize], labels: &[i32]) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &i in members {
        *counts.entry(labels[i]).or_insert(0) += 1;
    }
    let mut best = (i32::MAX, 0usize);
    for (&label, &count) in &counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn ascii_xyz_only_defaults_to_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n",
        )
        .unwrap();
        let cloud = load_cloud(&path, Some(PlyFormat::Ascii)).unwrap();
        assert_eq!(cloud.len(), 3);
        for c in cloud.colors() {
            assert_eq!(*c, [0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positions: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-100.0..100.0),
                ]
            })
            .collect();
        let colors: Vec<[f32; 3]> = (0..64)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let sem: Vec<i32> = (0..64).map(|_| rng.gen_range(0..5)).collect();
        let cloud = PointCloud::new(positions, colors, Some(sem), None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ply");
        save_cloud(&cloud, &path, PlyFormat::BinaryLittleEndian).unwrap();
        let back = load_cloud(&path, Some(PlyFormat::BinaryLittleEndian)).unwrap();
        assert_eq!(cloud.positions(), back.positions());
        assert_eq!(cloud.colors(), back.colors());
        assert_eq!(cloud.gt_semantic(), back.gt_semantic());
    }

    #[test]
    fn nan_coordinate_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 NaN 0\n",
        )
        .unwrap();
        let err = load_cloud(&path, None).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }

    #[test]
    fn truncated_binary_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        // Missing the rest of the payload.
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cloud(&path, None).unwrap_err();
        match err {
            Error::Parse { offset, msg, .. } => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn uchar_colors_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 51\n",
        )
        .unwrap();
        let cloud = load_cloud(&path, None).unwrap();
        let c = cloud.colors()[0];
        assert!((c[0] - 1.0).abs() < 1e-6);
        assert_eq!(c[1], 0.0);
        assert!((c[2] - 0.2).abs() * 255.0 < 1.0);
    }

    #[test]
    fn voxel_larger_than_bbox_collapses_to_centroid() {
        let cloud = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 4.0],
        ])
        .unwrap();
        let ds = voxel_downsample(&cloud, 100.0).unwrap();
        assert_eq!(ds.len(), 1);
        let p = ds.positions()[0];
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
        assert!((p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_corners_stay_distinct_at_half_voxel() {
        let mut corners = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    corners.push([x, y, z]);
                }
            }
        }
        let cloud = PointCloud::from_positions(corners.clone()).unwrap();
        let ds = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(ds.len(), 8);
        let mut got: Vec<_> = ds.positions().to_vec();
        let mut want = corners;
        let key = |p: &[f64; 3]| (p[0] * 4.0 + p[1] * 2.0 + p[2]) as i64;
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
    }

    #[test]
    fn downsample_matches_hash_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..3.0),
                ]
            })
            .collect();
        let colors: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let sem: Vec<i32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let cloud = PointCloud::new(positions.clone(), colors.clone(), Some(sem.clone()), None)
            .unwrap();
        let voxel = 0.1;
        let ds = voxel_downsample(&cloud, voxel).unwrap();

        // Independent oracle: hash-grid grouping with direct accumulation.
        let mut lo = [f64::INFINITY; 3];
        for p in &positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
            }
        }
        let mut groups: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            let k = (
                ((p[0] - lo[0]) / voxel).floor() as i64,
                ((p[1] - lo[1]) / voxel).floor() as i64,
                ((p[2] - lo[2]) / voxel).floor() as i64,
            );
            groups.entry(k).or_default().push(i);
        }
        assert_eq!(ds.len(), groups.len());

        let mut expected: Vec<((i64, i64, i64), [f64; 3], i32)> = groups
            .iter()
            .map(|(k, members)| {
                let inv = 1.0 / members.len() as f64;
                let mut pos = [0.0; 3];
                for &i in members {
                    for a in 0..3 {
                        pos[a] += positions[i][a];
                    }
                }
                let mut counts: HashMap<i32, usize> = HashMap::new();
                for &i in members {
                    *counts.entry(sem[i]).or_insert(0) += 1;
                }
                let best = counts
                    .iter()
                    .map(|(&l, &c)| (std::cmp::Reverse(c), l))
                    .min()
                    .map(|(_, l)| l)
                    .unwrap();
                (*k, [pos[0] * inv, pos[1] * inv, pos[2] * inv], best)
            })
            .collect();
        expected.sort_by_key(|e| e.0);

        for (i, (_, pos, label)) in expected.iter().enumerate() {
            for a in 0..3 {
                assert!((ds.positions()[i][a] - pos[a]).abs() < 1e-9);
            }
            assert_eq!(ds.gt_semantic().unwrap()[i], *label);
        }
    }

    #[test]
    fn downsample_points_stay_in_voxel_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let positions: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let cloud = PointCloud::from_positions(positions).unwrap();
        let voxel = 0.37;
        let ds = voxel_downsample(&cloud, voxel).unwrap();
        assert!(ds.len() <= cloud.len());
        let (lo, _) = cloud.bounding_box();
        for p in ds.positions() {
            for a in 0..3 {
                let cell = ((p[a] - lo[a]) / voxel).floor();
                let lo_edge = lo[a] + cell * voxel;
                assert!(p[a] >= lo_edge - 1e-9 && p[a] <= lo_edge + voxel + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_nonpositive_voxel() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3]]).unwrap();
        assert!(voxel_downsample(&cloud, 0.0).is_err());
        assert!(voxel_downsample(&cloud, -1.0).is_err());
    }
}
