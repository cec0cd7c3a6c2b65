//! Uniform-grid spatial index for radius and k-nearest-neighbor queries.
//!
//! Queries return indices in a deterministic order (sorted by index for radius
//! queries, by (distance, index) for k-NN), independent of insertion order.
//! Shell scans fall back to iterating occupied cells once the shell holds more
//! cells than the index does, so sparse far-apart data stays cheap.

use std::collections::HashMap;

pub struct GridIndex<'a> {
    positions: &'a [[f64; 3]],
    cell: f64,
    origin: [f64; 3],
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    /// Occupied cell keys, sorted.
    keys: Vec<(i64, i64, i64)>,
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn cheb(a: (i64, i64, i64), b: (i64, i64, i64)) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs()).max((a.2 - b.2).abs())
}

impl<'a> GridIndex<'a> {
    /// Build an index with the given cell edge length (must be > 0).
    pub fn new(positions: &'a [[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite());
        let mut origin = [f64::INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
            }
        }
        if positions.is_empty() {
            origin = [0.0; 3];
        }
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            cells
                .entry(Self::key_for(p, &origin, cell))
                .or_default()
                .push(i as u32);
        }
        let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
        keys.sort_unstable();
        GridIndex {
            positions,
            cell,
            origin,
            cells,
            keys,
        }
    }

    /// Build an index with a cell size suited to k-NN queries on this set.
    pub fn with_auto_cell(positions: &'a [[f64; 3]]) -> Self {
        let n = positions.len().max(1);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if positions.is_empty() {
            lo = [0.0; 3];
            hi = [1.0; 3];
        }
        let vol: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).product();
        let cell = (vol / n as f64).cbrt().max(1e-9);
        Self::new(positions, cell)
    }

    fn key_for(p: &[f64; 3], origin: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            ((p[0] - origin[0]) / cell).floor() as i64,
            ((p[1] - origin[1]) / cell).floor() as i64,
            ((p[2] - origin[2]) / cell).floor() as i64,
        )
    }

    /// All indices within Euclidean distance `r` of `center` (closed ball),
    /// sorted by index. Includes the query point itself when it is in the set.
    pub fn within(&self, center: &[f64; 3], r: f64) -> Vec<u32> {
        let r2 = r * r;
        let key = Self::key_for(center, &self.origin, self.cell);
        let span = (r / self.cell).ceil() as i64 + 1;
        let mut out = Vec::new();
        let mut visit = |bucket: &Vec<u32>| {
            for &i in bucket {
                if dist2(&self.positions[i as usize], center) <= r2 {
                    out.push(i);
                }
            }
        };
        let cube_cells = (2 * span + 1).pow(3) as usize;
        if cube_cells <= self.keys.len() {
            for kx in key.0 - span..=key.0 + span {
                for ky in key.1 - span..=key.1 + span {
                    for kz in key.2 - span..=key.2 + span {
                        if let Some(bucket) = self.cells.get(&(kx, ky, kz)) {
                            visit(bucket);
                        }
                    }
                }
            }
        } else {
            for k in &self.keys {
                if cheb(*k, key) <= span {
                    visit(&self.cells[k]);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` nearest neighbors of point `query_idx`, excluding itself,
    /// sorted by (distance, index). Returns fewer when the set is small.
    pub fn k_nearest(&self, query_idx: usize, k: usize) -> Vec<u32> {
        let n = self.positions.len();
        if k == 0 || n <= 1 {
            return Vec::new();
        }
        let center = &self.positions[query_idx];
        let key = Self::key_for(center, &self.origin, self.cell);

        let mut cand: Vec<(f64, u32)> = Vec::new();
        let push = |cand: &mut Vec<(f64, u32)>, bucket: &Vec<u32>| {
            for &i in bucket {
                if i as usize != query_idx {
                    cand.push((dist2(&self.positions[i as usize], center), i));
                }
            }
        };

        let mut ring = 0i64;
        loop {
            let shell_cells = if ring == 0 {
                1
            } else {
                ((2 * ring + 1).pow(3) - (2 * ring - 1).pow(3)) as usize
            };
            if shell_cells > self.keys.len() {
                // Sparse tail: finish with every not-yet-visited occupied cell.
                for kk in &self.keys {
                    if cheb(*kk, key) >= ring {
                        push(&mut cand, &self.cells[kk]);
                    }
                }
                break;
            }
            for kx in key.0 - ring..=key.0 + ring {
                for ky in key.1 - ring..=key.1 + ring {
                    for kz in key.2 - ring..=key.2 + ring {
                        let on_shell = (kx - key.0).abs() == ring
                            || (ky - key.1).abs() == ring
                            || (kz - key.2).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(bucket) = self.cells.get(&(kx, ky, kz)) {
                            push(&mut cand, bucket);
                        }
                    }
                }
            }
            // After scanning rings 0..=r, every point within Euclidean
            // distance (r-1)*cell of the center has been seen.
            let guaranteed = (ring - 1).max(0) as f64 * self.cell;
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cand.dedup_by_key(|c| c.1);
                if cand.len() >= k && cand[k - 1].0.sqrt() <= guaranteed {
                    break;
                }
            }
            if cand.len() == n - 1 {
                let worst = cand.iter().map(|c| c.0).fold(0.0f64, f64::max).sqrt();
                if worst <= guaranteed {
                    break;
                }
            }
            ring += 1;
        }
        cand.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cand.dedup_by_key(|c| c.1);
        cand.truncate(k);
        cand.into_iter().map(|(_, i)| i).collect()
    }
}
