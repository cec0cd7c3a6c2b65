//! Synthetic camera poses (grid rigs and cube rigs) and z-buffer point-splat
//! rendering of RGB + depth views.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::par;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Points closer than this along the optical axis are treated as behind the
/// camera.
pub const EPS_Z: f64 = 1e-6;

/// Pinhole intrinsics. Axes follow the usual convention: x right, y down,
/// z forward; pixel (0,0) is the top-left corner.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    /// 512x512 at 90 degrees horizontal field of view.
    fn default() -> Self {
        Intrinsics {
            fx: 256.0,
            fy: 256.0,
            cx: 256.0,
            cy: 256.0,
            width: 512,
            height: 512,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::argument("focal lengths must be positive"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::argument("image must be at least 16x16"));
        }
        Ok(())
    }
}

/// World-to-camera rigid transform plus intrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsic: Intrinsics,
    /// 4x4 world-to-camera transform; the camera looks along +z.
    pub extrinsic: [[f64; 4]; 4],
}

impl CameraPose {
    pub fn new(intrinsic: Intrinsics, extrinsic: [[f64; 4]; 4]) -> Result<Self> {
        intrinsic.validate()?;
        let pose = CameraPose { intrinsic, extrinsic };
        let resid = pose.orthonormality_residual();
        if resid > 1e-6 {
            return Err(Error::argument(format!(
                "rotation block not orthonormal (residual {resid:.3e})"
            )));
        }
        if pose.rotation_determinant() < 0.0 {
            return Err(Error::argument("rotation block has negative determinant"));
        }
        Ok(pose)
    }

    /// Max |R R^T - I| entry over the 3x3 rotation block.
    pub fn orthonormality_residual(&self) -> f64 {
        let r = &self.extrinsic;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[i][k] * r[j][k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    pub fn rotation_determinant(&self) -> f64 {
        let r = &self.extrinsic;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Transform a world point into camera coordinates.
    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let mut q = [0.0; 3];
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        q
    }

    /// Camera center in world coordinates (-R^T t).
    pub fn camera_position(&self) -> [f64; 3] {
        let e = &self.extrinsic;
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = -(e[0][i] * e[0][3] + e[1][i] * e[1][3] + e[2][i] * e[2][3]);
        }
        c
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Pose at `eye` looking toward `target`, world-up (0,0,1) with (0,1,0) as the
/// fallback when the view direction is vertical.
pub fn look_at_pose(eye: [f64; 3], target: [f64; 3], intrinsic: Intrinsics) -> Result<CameraPose> {
    let forward = normalize3([
        target[0] - eye[0],
        target[1] - eye[1],
        target[2] - eye[2],
    ]);
    if !forward.iter().all(|c| c.is_finite()) {
        return Err(Error::argument("look-at eye and target coincide"));
    }
    let mut up = [0.0, 0.0, 1.0];
    if (forward[0] * up[0] + forward[1] * up[1] + forward[2] * up[2]).abs() > 1.0 - 1e-9 {
        up = [0.0, 1.0, 0.0];
    }
    let right = normalize3(cross3(forward, up));
    let down = cross3(forward, right);
    let r = [right, down, forward];
    let mut extrinsic = [[0.0; 4]; 4];
    for i in 0..3 {
        extrinsic[i][..3].copy_from_slice(&r[i]);
        extrinsic[i][3] = -(r[i][0] * eye[0] + r[i][1] * eye[1] + r[i][2] * eye[2]);
    }
    extrinsic[3][3] = 1.0;
    CameraPose::new(intrinsic, extrinsic)
}

/// Result of [`grid_rig`]. `degenerate` flags an empty inset box.
pub struct GridRig {
    pub poses: Vec<CameraPose>,
    pub grid_points: Vec<[f64; 3]>,
    pub degenerate: bool,
}

/// Cameras on a regular grid filling the bounding box inset by `margin`,
/// anchored at the inset minimum corner. Each grid point carries 8 poses with
/// horizontal view directions at azimuths 0, 45, ..., 315 degrees.
pub fn grid_rig(
    cloud: &PointCloud,
    spacing: f64,
    margin: f64,
    intrinsic: Intrinsics,
) -> Result<GridRig> {
    if !(spacing > 0.0) {
        return Err(Error::argument("spacing must be > 0"));
    }
    if margin < 0.0 {
        return Err(Error::argument("margin must be >= 0"));
    }
    let (lo, hi) = cloud.bounding_box();
    let inset_lo = [lo[0] + margin, lo[1] + margin, lo[2] + margin];
    let inset_hi = [hi[0] - margin, hi[1] - margin, hi[2] - margin];
    if (0..3).any(|a| inset_lo[a] > inset_hi[a]) {
        return Ok(GridRig {
            poses: Vec::new(),
            grid_points: Vec::new(),
            degenerate: true,
        });
    }
    let mut counts = [0usize; 3];
    for a in 0..3 {
        let extent = inset_hi[a] - inset_lo[a];
        counts[a] = (extent / spacing + 1e-9).floor() as usize + 1;
    }
    let mut grid_points = Vec::with_capacity(counts.iter().product());
    for ix in 0..counts[0] {
        for iy in 0..counts[1] {
            for iz in 0..counts[2] {
                grid_points.push([
                    inset_lo[0] + ix as f64 * spacing,
                    inset_lo[1] + iy as f64 * spacing,
                    inset_lo[2] + iz as f64 * spacing,
                ]);
            }
        }
    }
    let mut poses = Vec::with_capacity(grid_points.len() * 8);
    for gp in &grid_points {
        for step in 0..8 {
            let az = std::f64::consts::FRAC_PI_4 * step as f64;
            let target = [gp[0] + az.cos(), gp[1] + az.sin(), gp[2]];
            poses.push(look_at_pose(*gp, target, intrinsic)?);
        }
    }
    Ok(GridRig {
        poses,
        grid_points,
        degenerate: false,
    })
}

/// Eight cameras at the corners of a cube of circumradius `radius` around
/// `target`, each looking at `target`.
pub fn cube_rig(target: [f64; 3], radius: f64, intrinsic: Intrinsics) -> Result<Vec<CameraPose>> {
    if !(radius > 0.0) {
        return Err(Error::argument("radius must be > 0"));
    }
    let s = radius / 3.0f64.sqrt();
    let mut poses = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let eye = [target[0] + s * sx, target[1] + s * sy, target[2] + s * sz];
                poses.push(look_at_pose(eye, target, intrinsic)?);
            }
        }
    }
    Ok(poses)
}

/// Outcome of projecting one world point through a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// In front of the camera and inside the image bounds.
    Hit { u: f64, v: f64, depth: f64 },
    /// In front of the camera but outside the image.
    OutOfBounds { u: f64, v: f64, depth: f64 },
    /// At or behind the near plane (camera-space z <= EPS_Z).
    Behind,
}

impl Projection {
    pub fn hit(&self) -> Option<(f64, f64, f64)> {
        match *self {
            Projection::Hit { u, v, depth } => Some((u, v, depth)),
            _ => None,
        }
    }
}

/// Project a single world point: u = fx*qx/qz + cx, v = fy*qy/qz + cy,
/// depth = qz in camera space.
pub fn project_point(pose: &CameraPose, p: &[f64; 3]) -> Projection {
    let q = pose.world_to_camera(p);
    if q[2] <= EPS_Z {
        return Projection::Behind;
    }
    let k = &pose.intrinsic;
    let u = k.fx * q[0] / q[2] + k.cx;
    let v = k.fy * q[1] / q[2] + k.cy;
    if u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64 {
        Projection::Hit { u, v, depth: q[2] }
    } else {
        Projection::OutOfBounds { u, v, depth: q[2] }
    }
}

/// Project a batch of points through one pose.
pub fn project_points(points: &[[f64; 3]], pose: &CameraPose) -> Vec<Projection> {
    par::map_slice(points, |p| project_point(pose, p))
}

/// One rendered synthetic view: RGB in [0,1] plus a metric depth map where
/// +inf marks empty pixels.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub view_id: String,
    pub pose: CameraPose,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
}

impl RenderedView {
    pub fn width(&self) -> u32 {
        self.pose.intrinsic.width
    }

    pub fn height(&self) -> u32 {
        self.pose.intrinsic.height
    }

    pub fn pixel_index(&self, u: u32, v: u32) -> usize {
        (v * self.width() + u) as usize
    }
}

/// Z-buffer point splatting: each visible point paints a (2*splat_px+1)^2
/// square; the nearest depth wins per pixel (ties keep the lower point index).
pub fn splat_render(
    cloud: &PointCloud,
    pose: &CameraPose,
    splat_px: u32,
    view_id: impl Into<String>,
) -> RenderedView {
    let w = pose.intrinsic.width as i64;
    let h = pose.intrinsic.height as i64;
    let npix = (w * h) as usize;
    let mut rgb = vec![[0.0f32; 3]; npix];
    let mut depth = vec![f32::INFINITY; npix];

    let projections = project_points(cloud.positions(), pose);
    let s = splat_px as i64;
    for (i, proj) in projections.iter().enumerate() {
        let Some((u, v, d)) = proj.hit() else {
            continue;
        };
        let pu = u.floor() as i64;
        let pv = v.floor() as i64;
        let d32 = d as f32;
        let color = cloud.colors()[i];
        for dv in -s..=s {
            let y = pv + dv;
            if y < 0 || y >= h {
                continue;
            }
            for du in -s..=s {
                let x = pu + du;
                if x < 0 || x >= w {
                    continue;
                }
                let idx = (y * w + x) as usize;
                if d32 < depth[idx] {
                    depth[idx] = d32;
                    rgb[idx] = color;
                }
            }
        }
    }
    RenderedView {
        view_id: view_id.into(),
        pose: pose.clone(),
        rgb,
        depth,
    }
}

/// Render one view per pose; views render concurrently, output order matches
/// pose order.
pub fn render_batch(
    cloud: &PointCloud,
    poses: &[CameraPose],
    splat_px: u32,
    id_prefix: &str,
) -> Vec<RenderedView> {
    par::map_range(poses.len(), |i| {
        splat_render(cloud, &poses[i], splat_px, format!("{id_prefix}{i:05}"))
    })
}

// --- file formats ---------------------------------------------------------

/// Write an 8-bit binary PPM (P6).
pub fn write_ppm(view: &RenderedView, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(view.rgb.len() * 3 + 32);
    let _ = write!(buf, "P6\n{} {}\n255\n", view.width(), view.height());
    for px in &view.rgb {
        for c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Depth sidecar: magic "HDM1", u32 height, u32 width (little-endian), then
/// height*width float32 meters, row-major.
pub fn write_depth(view: &RenderedView, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(view.depth.len() * 4 + 12);
    buf.extend_from_slice(b"HDM1");
    buf.extend_from_slice(&view.height().to_le_bytes());
    buf.extend_from_slice(&view.width().to_le_bytes());
    for d in &view.depth {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read an "HDM1" depth sidecar; returns (height, width, depths).
pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != b"HDM1" {
        return Err(Error::parse(path, 0, "not an HDM1 depth file"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let need = 12 + (h as usize) * (w as usize) * 4;
    if bytes.len() != need {
        return Err(Error::parse(path, bytes.len() as u64, "truncated depth payload"));
    }
    let depths = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, depths))
}

/// One line of the pose manifest (JSON Lines, one record per view).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub view_id: String,
    /// Row-major 4x4 world-to-camera matrix.
    pub extrinsic: Vec<f64>,
    /// (fx, fy, cx, cy, width, height)
    pub intrinsic: (f64, f64, f64, f64, u32, u32),
}

impl PoseRecord {
    pub fn from_pose(view_id: &str, pose: &CameraPose) -> Self {
        let mut extrinsic = Vec::with_capacity(16);
        for row in &pose.extrinsic {
            extrinsic.extend_from_slice(row);
        }
        let k = pose.intrinsic;
        PoseRecord {
            view_id: view_id.to_string(),
            extrinsic,
            intrinsic: (k.fx, k.fy, k.cx, k.cy, k.width, k.height),
        }
    }

    pub fn to_pose(&self) -> Result<CameraPose> {
        if self.extrinsic.len() != 16 {
            return Err(Error::argument("extrinsic must have 16 entries"));
        }
        let mut e = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                e[i][j] = self.extrinsic[i * 4 + j];
            }
        }
        let (fx, fy, cx, cy, width, height) = self.intrinsic;
        CameraPose::new(
            Intrinsics { fx, fy, cx, cy, width, height },
            e,
        )
    }
}

pub fn write_pose_manifest(records: &[PoseRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        let line = serde_json::to_string(r).expect("pose record serializes");
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_pose_manifest(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i as u64, format!("bad pose record: {e}")))?;
        out.push(rec);
    }
    Ok(out)
}
