//! Hierarchical superpoint partition by graph energy minimization, plus
//! per-superpoint geometric features, contracted adjacency, and the
//! three-target vector propagation up the hierarchy.
//!
//! The partition solver minimizes
//!
//! ```text
//! E(pi) = sum_i ||x_i - c_pi(i)||^2 + lambda * #cut_edges
//! ```
//!
//! with a greedy split / merge / move scheme: starting from one component,
//! repeatedly apply the steepest energy-decreasing binary split, then merge
//! adjacent components while that lowers energy, then relocate single nodes.
//! Every accepted operation strictly decreases the energy.

use crate::error::{Error, Result};
use crate::lift::FeatureField;
use crate::par;
use crate::pseudolabel::{spherical_kmeans, PseudoLabelSet};
use crate::spatial::GridIndex;
use crate::{cloud::PointCloud, derive_seed};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SP_GEOM_DIM: usize = 11;
pub const EDGE_FEAT_DIM: usize = 10;

/// Undirected graph over `n` nodes; edges stored once with a < b, sorted.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(u32, u32)>,
}

impl Graph {
    pub fn adjacency_lists(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }
}

/// Symmetrized k-nearest-neighbor graph; ties broken by (distance, index).
pub fn build_adjacency(positions: &[[f64; 3]], k_nn: usize) -> Result<Graph> {
    if k_nn < 1 {
        return Err(Error::argument("k_nn must be >= 1"));
    }
    if positions.len() <= k_nn {
        return Err(Error::argument(format!(
            "need more than k_nn={k_nn} points, got {}",
            positions.len()
        )));
    }
    let index = GridIndex::with_auto_cell(positions);
    let neighbor_lists: Vec<Vec<u32>> =
        par::map_range(positions.len(), |i| index.k_nearest(i, k_nn));
    let mut edges = Vec::with_capacity(positions.len() * k_nn);
    for (i, nbs) in neighbor_lists.iter().enumerate() {
        for &j in nbs {
            let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
            edges.push((a, b));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(Graph {
        n: positions.len(),
        edges,
    })
}

/// Result of one partition solve.
#[derive(Debug, Clone)]
pub struct PartitionResult {
    /// Node -> superpoint id, renumbered by lowest member index.
    pub assignment: Vec<u32>,
    pub n_superpoints: usize,
    /// Final energy (recomputed from scratch).
    pub energy: f64,
    /// Energy after the initial state and after every accepted operation.
    pub energy_trace: Vec<f64>,
}

/// Energy of an assignment under the piecewise-constant model.
pub fn partition_energy(
    graph: &Graph,
    features: &[f64],
    dim: usize,
    lambda: f64,
    assignment: &[u32],
) -> f64 {
    let n = graph.n;
    assert_eq!(features.len(), n * dim);
    assert_eq!(assignment.len(), n);
    let n_comp = assignment.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut sum = vec![0.0f64; n_comp * dim];
    let mut count = vec![0usize; n_comp];
    let mut sumsq = 0.0f64;
    for i in 0..n {
        let c = assignment[i] as usize;
        count[c] += 1;
        for d in 0..dim {
            let x = features[i * dim + d];
            sum[c * dim + d] += x;
            sumsq += x * x;
        }
    }
    let mut data = sumsq;
    for c in 0..n_comp {
        if count[c] > 0 {
            let norm2: f64 = sum[c * dim..(c + 1) * dim].iter().map(|x| x * x).sum();
            data -= norm2 / count[c] as f64;
        }
    }
    let cut = graph
        .edges
        .iter()
        .filter(|&&(a, b)| assignment[a as usize] != assignment[b as usize])
        .count();
    data + lambda * cut as f64
}

const SPLIT_EXHAUSTIVE_MAX: usize = 12;
const IMPROVE_EPS: f64 = 1e-12;

struct Solver<'a> {
    dim: usize,
    features: &'a [f64],
    adj: Vec<Vec<u32>>,
    lambda: f64,
    assign: Vec<usize>,
    members: Vec<Vec<u32>>, // sorted; empty slots allowed after merges
    sum: Vec<f64>,          // comp * dim
    sumsq: Vec<f64>,        // comp: sum of ||x||^2
    energy: f64,
    trace: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn feat(&self, i: u32) -> &[f64] {
        &self.features[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    fn sqdev_of(&self, c: usize) -> f64 {
        let n = self.members[c].len();
        if n == 0 {
            return 0.0;
        }
        let norm2: f64 = self.sum[c * self.dim..(c + 1) * self.dim]
            .iter()
            .map(|x| x * x)
            .sum();
        (self.sumsq[c] - norm2 / n as f64).max(0.0)
    }

    fn stats_of(&self, members: &[u32]) -> (Vec<f64>, f64) {
        let mut sum = vec![0.0f64; self.dim];
        let mut sumsq = 0.0f64;
        for &m in members {
            for (s, x) in sum.iter_mut().zip(self.feat(m)) {
                *s += *x;
                sumsq += *x * *x;
            }
        }
        (sum, sumsq)
    }

    fn sqdev_from(sum: &[f64], sumsq: f64, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let norm2: f64 = sum.iter().map(|x| x * x).sum();
        (sumsq - norm2 / n as f64).max(0.0)
    }

    /// Count internal edges of `comp` crossing between side flags.
    fn cross_edges(&self, members: &[u32], side_b: &[bool]) -> usize {
        // side_b indexed by local position; build a lookup by node id.
        let mut local = BTreeMap::new();
        for (li, &m) in members.iter().enumerate() {
            local.insert(m, li);
        }
        let mut cut = 0usize;
        for (li, &m) in members.iter().enumerate() {
            for &nb in &self.adj[m as usize] {
                if let Some(&lj) = local.get(&nb) {
                    if lj > li && side_b[li] != side_b[lj] {
                        cut += 1;
                    }
                }
            }
        }
        cut
    }

    /// Best binary split of component `c`: returns (delta, side_b flags).
    fn best_split(&self, c: usize) -> Option<(f64, Vec<bool>)> {
        let members = &self.members[c];
        let s = members.len();
        if s < 2 {
            return None;
        }
        let base_sqdev = self.sqdev_of(c);
        let mut best: Option<(f64, Vec<bool>)> = None;
        let consider = |delta: f64, side: Vec<bool>, best: &mut Option<(f64, Vec<bool>)>| {
            if delta < best.as_ref().map_or(-IMPROVE_EPS, |b| b.0) {
                *best = Some((delta, side));
            }
        };

        // Disconnected components split for free (no new cut edges).
        let islands = self.islands(members);
        if islands.len() > 1 {
            let mut side = vec![false; s];
            for &li in &islands[0] {
                side[li] = true;
            }
            let delta = self.split_delta(members, &side, base_sqdev);
            consider(delta, side, &mut best);
        }

        if s <= SPLIT_EXHAUSTIVE_MAX {
            // All proper bipartitions with member 0 fixed on side A.
            for mask in 1u32..(1 << (s - 1)) {
                let mut side = vec![false; s];
                for (li, flag) in side.iter_mut().enumerate().skip(1) {
                    *flag = mask & (1 << (li - 1)) != 0;
                }
                let delta = self.split_delta(members, &side, base_sqdev);
                consider(delta, side, &mut best);
            }
        } else {
            if let Some(side) = self.two_means_side(members) {
                let delta = self.split_delta(members, &side, base_sqdev);
                consider(delta, side, &mut best);
            }
        }
        best
    }

    fn split_delta(&self, members: &[u32], side_b: &[bool], base_sqdev: f64) -> f64 {
        let dim = self.dim;
        let mut sum_b = vec![0.0f64; dim];
        let mut sumsq_b = 0.0;
        let mut n_b = 0usize;
        let mut sum_a = vec![0.0f64; dim];
        let mut sumsq_a = 0.0;
        let mut n_a = 0usize;
        for (li, &m) in members.iter().enumerate() {
            let f = self.feat(m);
            if side_b[li] {
                n_b += 1;
                for (s, x) in sum_b.iter_mut().zip(f) {
                    *s += *x;
                }
                sumsq_b += f.iter().map(|x| x * x).sum::<f64>();
            } else {
                n_a += 1;
                for (s, x) in sum_a.iter_mut().zip(f) {
                    *s += *x;
                }
                sumsq_a += f.iter().map(|x| x * x).sum::<f64>();
            }
        }
        if n_a == 0 || n_b == 0 {
            return 0.0;
        }
        let data = Self::sqdev_from(&sum_a, sumsq_a, n_a) + Self::sqdev_from(&sum_b, sumsq_b, n_b)
            - base_sqdev;
        data + self.lambda * self.cross_edges(members, side_b) as f64
    }

    /// Connected components of the induced subgraph, as local index lists.
    fn islands(&self, members: &[u32]) -> Vec<Vec<usize>> {
        let mut local = BTreeMap::new();
        for (li, &m) in members.iter().enumerate() {
            local.insert(m, li);
        }
        let mut seen = vec![false; members.len()];
        let mut out = Vec::new();
        for start in 0..members.len() {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(li) = stack.pop() {
                comp.push(li);
                for &nb in &self.adj[members[li] as usize] {
                    if let Some(&lj) = local.get(&nb) {
                        if !seen[lj] {
                            seen[lj] = true;
                            stack.push(lj);
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Two-means heuristic split with a cut-aware local refinement.
    fn two_means_side(&self, members: &[u32]) -> Option<Vec<bool>> {
        let dim = self.dim;
        let s = members.len();
        let (sum, _) = self.stats_of(members);
        let mean: Vec<f64> = sum.iter().map(|x| x / s as f64).collect();
        let d2 = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        // Seeds: farthest member from the mean, then farthest from that.
        let far1 = (0..s)
            .max_by(|&a, &b| {
                d2(self.feat(members[a]), &mean)
                    .partial_cmp(&d2(self.feat(members[b]), &mean))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        let far2 = (0..s)
            .max_by(|&a, &b| {
                d2(self.feat(members[a]), self.feat(members[far1]))
                    .partial_cmp(&d2(self.feat(members[b]), self.feat(members[far1])))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        if far1 == far2 {
            return None;
        }
        let mut c1: Vec<f64> = self.feat(members[far1]).to_vec();
        let mut c2: Vec<f64> = self.feat(members[far2]).to_vec();
        let mut side = vec![false; s];
        for _ in 0..10 {
            let mut changed = false;
            for li in 0..s {
                let f = self.feat(members[li]);
                let b = d2(f, &c2) < d2(f, &c1);
                if b != side[li] {
                    side[li] = b;
                    changed = true;
                }
            }
            let mut n2 = 0usize;
            let mut s1 = vec![0.0f64; dim];
            let mut s2 = vec![0.0f64; dim];
            for li in 0..s {
                let f = self.feat(members[li]);
                if side[li] {
                    n2 += 1;
                    for (t, x) in s2.iter_mut().zip(f) {
                        *t += *x;
                    }
                } else {
                    for (t, x) in s1.iter_mut().zip(f) {
                        *t += *x;
                    }
                }
            }
            let n1 = s - n2;
            if n1 == 0 || n2 == 0 {
                return None;
            }
            for (t, x) in c1.iter_mut().zip(&s1) {
                *t = *x / n1 as f64;
            }
            for (t, x) in c2.iter_mut().zip(&s2) {
                *t = *x / n2 as f64;
            }
            if !changed {
                break;
            }
        }
        if side.iter().all(|&b| b) || side.iter().all(|&b| !b) {
            return None;
        }
        self.refine_side(members, &mut side);
        Some(side)
    }

    /// Move single members between sides while the split objective improves.
    fn refine_side(&self, members: &[u32], side: &mut [bool]) {
        let s = members.len();
        let mut local = BTreeMap::new();
        for (li, &m) in members.iter().enumerate() {
            local.insert(m, li);
        }
        for _sweep in 0..10 {
            let mut improved = false;
            for li in 0..s {
                // Evaluate flipping member li.
                let from = side[li];
                let (mut n_f, mut n_t) = (0usize, 0usize);
                let mut sum_f = vec![0.0f64; self.dim];
                let mut sum_t = vec![0.0f64; self.dim];
                for lj in 0..s {
                    let f = self.feat(members[lj]);
                    if side[lj] == from {
                        n_f += 1;
                        for (tq, x) in sum_f.iter_mut().zip(f) {
                            *tq += *x;
                        }
                    } else {
                        n_t += 1;
                        for (tq, x) in sum_t.iter_mut().zip(f) {
                            *tq += *x;
                        }
                    }
                }
                if n_f <= 1 {
                    continue;
                }
                let x = self.feat(members[li]);
                let mean_f: Vec<f64> = sum_f.iter().map(|v| v / n_f as f64).collect();
                let mean_t: Vec<f64> = sum_t.iter().map(|v| v / n_t as f64).collect();
                let d_remove = -(n_f as f64 / (n_f as f64 - 1.0))
                    * x.iter().zip(&mean_f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let d_add = (n_t as f64 / (n_t as f64 + 1.0))
                    * x.iter().zip(&mean_t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let mut d_cut = 0i64;
                for &nb in &self.adj[members[li] as usize] {
                    if let Some(&lj) = local.get(&nb) {
                        if side[lj] == from {
                            d_cut += 1; // becomes a cross edge
                        } else {
                            d_cut -= 1;
                        }
                    }
                }
                let delta = d_remove + d_add + self.lambda * d_cut as f64;
                if delta < -IMPROVE_EPS {
                    side[li] = !from;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
    }

    fn apply_split(&mut self, c: usize, side_b: &[bool], delta: f64) {
        let members = std::mem::take(&mut self.members[c]);
        let mut keep = Vec::new();
        let mut moved = Vec::new();
        for (li, &m) in members.iter().enumerate() {
            if side_b[li] {
                moved.push(m);
            } else {
                keep.push(m);
            }
        }
        let new_c = self.members.len();
        for &m in &moved {
            self.assign[m as usize] = new_c;
        }
        let (sum_keep, sumsq_keep) = self.stats_of(&keep);
        let (sum_moved, sumsq_moved) = self.stats_of(&moved);
        self.members[c] = keep;
        self.sum[c * self.dim..(c + 1) * self.dim].copy_from_slice(&sum_keep);
        self.sumsq[c] = sumsq_keep;
        self.members.push(moved);
        self.sum.extend_from_slice(&sum_moved);
        self.sumsq.push(sumsq_moved);
        self.energy += delta;
        self.trace.push(self.energy);
    }

    /// Merge phase: repeatedly apply the best adjacent merge while improving.
    fn merge_phase(&mut self) -> bool {
        let mut any = false;
        loop {
            // Adjacent pairs and their connecting edge counts.
            let mut pair_edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for (a, lists) in self.adj.iter().enumerate() {
                let ca = self.assign[a];
                for &b in lists {
                    if (b as usize) < a {
                        continue;
                    }
                    let cb = self.assign[b as usize];
                    if ca != cb {
                        let key = if ca < cb { (ca, cb) } else { (cb, ca) };
                        *pair_edges.entry(key).or_insert(0) += 1;
                    }
                }
            }
            let mut best: Option<(f64, (usize, usize))> = None;
            for (&(ca, cb), &edges) in &pair_edges {
                let (na, nb) = (self.members[ca].len(), self.members[cb].len());
                if na == 0 || nb == 0 {
                    continue;
                }
                let mut mean_gap2 = 0.0f64;
                for d in 0..self.dim {
                    let ma = self.sum[ca * self.dim + d] / na as f64;
                    let mb = self.sum[cb * self.dim + d] / nb as f64;
                    mean_gap2 += (ma - mb) * (ma - mb);
                }
                let d_data = (na as f64 * nb as f64) / (na + nb) as f64 * mean_gap2;
                let delta = d_data - self.lambda * edges as f64;
                if delta < best.as_ref().map_or(-IMPROVE_EPS, |b| b.0) {
                    best = Some((delta, (ca, cb)));
                }
            }
            let Some((delta, (ca, cb))) = best else {
                break;
            };
            // Merge cb into ca.
            let moved = std::mem::take(&mut self.members[cb]);
            for &m in &moved {
                self.assign[m as usize] = ca;
            }
            let mut merged = std::mem::take(&mut self.members[ca]);
            merged.extend(moved);
            merged.sort_unstable();
            self.members[ca] = merged;
            for d in 0..self.dim {
                let add = self.sum[cb * self.dim + d];
                self.sum[ca * self.dim + d] += add;
                self.sum[cb * self.dim + d] = 0.0;
            }
            self.sumsq[ca] += self.sumsq[cb];
            self.sumsq[cb] = 0.0;
            self.energy += delta;
            self.trace.push(self.energy);
            any = true;
        }
        any
    }

    /// Move phase: relocate single nodes to adjacent components while the
    /// energy decreases.
    fn move_phase(&mut self) -> bool {
        let n = self.assign.len();
        let mut any = false;
        for _sweep in 0..40 {
            let mut improved = false;
            for i in 0..n {
                let from = self.assign[i];
                if self.members[from].len() <= 1 {
                    continue;
                }
                // Candidate components among neighbors, plus cut-edge deltas.
                let mut cut_with: BTreeMap<usize, i64> = BTreeMap::new();
                for &nb in &self.adj[i] {
                    *cut_with.entry(self.assign[nb as usize]).or_insert(0) += 1;
                }
                let x: Vec<f64> = self.feat(i as u32).to_vec();
                let n_f = self.members[from].len();
                let mut gap_from = 0.0;
                for d in 0..self.dim {
                    let mf = self.sum[from * self.dim + d] / n_f as f64;
                    gap_from += (x[d] - mf) * (x[d] - mf);
                }
                let d_remove = -(n_f as f64 / (n_f as f64 - 1.0)) * gap_from;
                let edges_in_from = cut_with.get(&from).copied().unwrap_or(0);

                let mut best: Option<(f64, usize)> = None;
                for (&to, &edges_to) in &cut_with {
                    if to == from {
                        continue;
                    }
                    let n_t = self.members[to].len();
                    if n_t == 0 {
                        continue;
                    }
                    let mut gap_to = 0.0;
                    for d in 0..self.dim {
                        let mt = self.sum[to * self.dim + d] / n_t as f64;
                        gap_to += (x[d] - mt) * (x[d] - mt);
                    }
                    let d_add = (n_t as f64 / (n_t as f64 + 1.0)) * gap_to;
                    let d_cut = self.lambda * (edges_in_from - edges_to) as f64;
                    let delta = d_remove + d_add + d_cut;
                    if delta < best.as_ref().map_or(-IMPROVE_EPS, |b| b.0) {
                        best = Some((delta, to));
                    }
                }
                if let Some((delta, to)) = best {
                    // Apply the move.
                    let pos = self.members[from].binary_search(&(i as u32)).unwrap();
                    self.members[from].remove(pos);
                    let ins = self.members[to].binary_search(&(i as u32)).unwrap_err();
                    self.members[to].insert(ins, i as u32);
                    self.assign[i] = to;
                    let mut xsq = 0.0;
                    for d in 0..self.dim {
                        self.sum[from * self.dim + d] -= x[d];
                        self.sum[to * self.dim + d] += x[d];
                        xsq += x[d] * x[d];
                    }
                    self.sumsq[from] -= xsq;
                    self.sumsq[to] += xsq;
                    self.energy += delta;
                    self.trace.push(self.energy);
                    improved = true;
                    any = true;
                }
            }
            if !improved {
                break;
            }
        }
        any
    }

    fn split_phase(&mut self) -> bool {
        let mut any = false;
        // Steepest-first: keep a per-component cache of best splits and apply
        // the global best until nothing improves.
        let mut cache: Vec<Option<Option<(f64, Vec<bool>)>>> = vec![None; self.members.len()];
        loop {
            for c in 0..self.members.len() {
                if cache.len() < self.members.len() {
                    cache.resize(self.members.len(), None);
                }
                if cache[c].is_none() {
                    cache[c] = Some(self.best_split(c));
                }
            }
            let mut best: Option<(f64, usize)> = None;
            for (c, entry) in cache.iter().enumerate() {
                if let Some(Some((delta, _))) = entry {
                    if *delta < best.as_ref().map_or(-IMPROVE_EPS, |b| b.0) {
                        best = Some((*delta, c));
                    }
                }
            }
            let Some((_, c)) = best else {
                break;
            };
            let (delta, side) = cache[c].take().unwrap().unwrap();
            self.apply_split(c, &side, delta);
            cache[c] = None;
            cache.push(None); // the new component
            any = true;
        }
        any
    }
}

/// Greedy energy-minimizing partition; see the module docs for the scheme.
pub fn partition_level(
    graph: &Graph,
    features: &[f64],
    dim: usize,
    lambda: f64,
) -> Result<PartitionResult> {
    if lambda < 0.0 {
        return Err(Error::argument("lambda must be >= 0"));
    }
    if dim == 0 || features.len() != graph.n * dim {
        return Err(Error::argument("feature matrix shape mismatch"));
    }
    if graph.n == 0 {
        return Err(Error::argument("empty graph"));
    }
    let all: Vec<u32> = (0..graph.n as u32).collect();
    let mut solver = Solver {
        dim,
        features,
        adj: graph.adjacency_lists(),
        lambda,
        assign: vec![0; graph.n],
        members: vec![all],
        sum: vec![0.0; dim],
        sumsq: vec![0.0],
        energy: 0.0,
        trace: Vec::new(),
    };
    let (sum, sumsq) = solver.stats_of(&solver.members[0]);
    solver.sum = sum;
    solver.sumsq = vec![sumsq];
    solver.energy = solver.sqdev_of(0);
    solver.trace.push(solver.energy);

    for _cycle in 0..20 {
        let a = solver.split_phase();
        let b = solver.merge_phase();
        let c = solver.move_phase();
        if !(a || b || c) {
            break;
        }
    }

    // Renumber by lowest member index.
    let n = graph.n;
    let mut first_of: BTreeMap<usize, u32> = BTreeMap::new();
    for i in 0..n {
        first_of.entry(solver.assign[i]).or_insert(i as u32);
    }
    let mut comps: Vec<(u32, usize)> = first_of.iter().map(|(&c, &f)| (f, c)).collect();
    comps.sort_unstable();
    let mut remap: BTreeMap<usize, u32> = BTreeMap::new();
    for (new_id, &(_, old)) in comps.iter().enumerate() {
        remap.insert(old, new_id as u32);
    }
    let assignment: Vec<u32> = solver.assign.iter().map(|c| remap[c]).collect();
    let n_superpoints = comps.len();
    let energy = partition_energy(graph, features, dim, lambda, &assignment);
    Ok(PartitionResult {
        assignment,
        n_superpoints,
        energy,
        energy_trace: solver.trace,
    })
}

// --- geometric features and contracted edges --------------------------------

/// Handcrafted per-superpoint features: centroid (3), bbox extent (3),
/// planarity, linearity, verticality, mean color (first two channels).
pub fn superpoint_geometry(
    positions: &[[f64; 3]],
    colors: &[[f32; 3]],
    members: &[u32],
) -> [f64; SP_GEOM_DIM] {
    let n = members.len().max(1) as f64;
    let mut centroid = [0.0f64; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut mean_color = [0.0f64; 2];
    for &m in members {
        let p = positions[m as usize];
        for a in 0..3 {
            centroid[a] += p[a];
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        mean_color[0] += colors[m as usize][0] as f64;
        mean_color[1] += colors[m as usize][1] as f64;
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    mean_color[0] /= n;
    mean_color[1] /= n;

    let mut cov = [[0.0f64; 3]; 3];
    for &m in members {
        let p = positions[m as usize];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (p[a] - centroid[a]) * (p[b] - centroid[b]);
            }
        }
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    let m = nalgebra::Matrix3::from_fn(|r, c| cov[r][c]);
    let eig = m.symmetric_eigen();
    let mut pairs: Vec<(f64, nalgebra::Vector3<f64>)> = (0..3)
        .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (l1, l2, l3) = (pairs[0].0, pairs[1].0, pairs[2].0);
    let (planarity, linearity, verticality) = if l1 > 1e-12 {
        let normal = &pairs[2].1;
        (
            (l2 - l3) / l1,
            (l1 - l2) / l1,
            1.0 - normal[2].abs() / normal.norm().max(1e-12),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    [
        centroid[0],
        centroid[1],
        centroid[2],
        (hi[0] - lo[0]).max(0.0),
        (hi[1] - lo[1]).max(0.0),
        (hi[2] - lo[2]).max(0.0),
        planarity,
        linearity,
        verticality,
        mean_color[0],
        mean_color[1],
    ]
}

/// Contract child edges through a parent map: one edge per adjacent superpoint
/// pair with orientation-canonical features built from the crossing offsets.
///
/// Offsets are oriented child-a -> child-b for the (low, high) superpoint pair
/// and then sign-flipped so the centroid offset is lexicographically positive,
/// which keeps the features invariant under superpoint relabeling.
pub fn contract_edges(
    child_edges: &[(u32, u32)],
    parent: &[u32],
    child_centroids: &[[f64; 3]],
    sp_centroids: &[[f64; 3]],
) -> (Vec<(u32, u32)>, Vec<f64>) {
    let mut groups: BTreeMap<(u32, u32), Vec<[f64; 3]>> = BTreeMap::new();
    for &(a, b) in child_edges {
        let (pa, pb) = (parent[a as usize], parent[b as usize]);
        if pa == pb {
            continue;
        }
        let (lo, hi, ca, cb) = if pa < pb { (pa, pb, a, b) } else { (pb, pa, b, a) };
        let offset = [
            child_centroids[cb as usize][0] - child_centroids[ca as usize][0],
            child_centroids[cb as usize][1] - child_centroids[ca as usize][1],
            child_centroids[cb as usize][2] - child_centroids[ca as usize][2],
        ];
        groups.entry((lo, hi)).or_default().push(offset);
    }
    let mut edges = Vec::with_capacity(groups.len());
    let mut feats = Vec::with_capacity(groups.len() * EDGE_FEAT_DIM);
    for ((a, b), offsets) in groups {
        let mut dc = [
            sp_centroids[b as usize][0] - sp_centroids[a as usize][0],
            sp_centroids[b as usize][1] - sp_centroids[a as usize][1],
            sp_centroids[b as usize][2] - sp_centroids[a as usize][2],
        ];
        // Geometric sign canonicalization: first non-negligible component of
        // the centroid offset made positive.
        let mut sign = 1.0;
        for &x in &dc {
            if x.abs() > 1e-12 {
                sign = x.signum();
                break;
            }
        }
        for x in dc.iter_mut() {
            *x *= sign;
        }
        let norm = (dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2]).sqrt();
        let inv = 1.0 / offsets.len() as f64;
        let mut mean = [0.0f64; 3];
        for o in &offsets {
            for a in 0..3 {
                mean[a] += o[a] * sign;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv;
        }
        let mut var = [0.0f64; 3];
        for o in &offsets {
            for a in 0..3 {
                let d = o[a] * sign - mean[a];
                var[a] += d * d;
            }
        }
        let std = [
            (var[0] * inv).max(0.0).sqrt(),
            (var[1] * inv).max(0.0).sqrt(),
            (var[2] * inv).max(0.0).sqrt(),
        ];
        edges.push((a, b));
        feats.extend_from_slice(&[
            dc[0], dc[1], dc[2], norm, mean[0], mean[1], mean[2], std[0], std[1], std[2],
        ]);
    }
    (edges, feats)
}

// --- hierarchy ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub levels: usize,
    /// One lambda per level.
    pub lambdas: Vec<f64>,
    pub k_nn: usize,
    pub pos_weight: f64,
    pub color_weight: f64,
    /// K for the per-superpoint spherical k-means in target propagation.
    pub target_k: usize,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            levels: 3,
            lambdas: vec![0.01, 0.1, 1.0],
            k_nn: 8,
            pos_weight: 1.0,
            color_weight: 1.0,
            target_k: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HierarchyLevel {
    /// Child element (raw point at level 0) -> superpoint id at this level.
    pub parent_of: Vec<u32>,
    pub n_superpoints: usize,
    pub edges: Vec<(u32, u32)>,
    pub edge_feats: Vec<f64>,
    pub sp_geom: Vec<f64>,
    pub lambda: f64,
}

impl HierarchyLevel {
    pub fn geom(&self, sp: usize) -> &[f64] {
        &self.sp_geom[sp * SP_GEOM_DIM..(sp + 1) * SP_GEOM_DIM]
    }

    pub fn centroid(&self, sp: usize) -> [f64; 3] {
        let g = self.geom(sp);
        [g[0], g[1], g[2]]
    }
}

/// Per-superpoint supervision targets at one level.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    /// S x 3 x C target vectors.
    pub vectors: Vec<f64>,
    pub majority_class: Vec<i32>,
    pub is_thing: Vec<bool>,
    pub masked: Vec<bool>,
    pub dim: usize,
}

impl LevelTargets {
    pub fn target(&self, sp: usize, which: usize) -> &[f64] {
        let base = (sp * 3 + which) * self.dim;
        &self.vectors[base..base + self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct SuperpointHierarchy {
    pub levels: Vec<HierarchyLevel>,
    pub targets: Vec<LevelTargets>,
    pub n_points: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SuperpointHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Map a raw point to its superpoint at `level` (0-based).
    pub fn point_to_level(&self, point: usize, level: usize) -> u32 {
        let mut id = self.levels[0].parent_of[point];
        for l in 1..=level {
            id = self.levels[l].parent_of[id as usize];
        }
        id
    }

    /// Member raw points per superpoint at a level.
    pub fn members_at(&self, level: usize) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.levels[level].n_superpoints];
        for p in 0..self.n_points {
            out[self.point_to_level(p, level) as usize].push(p as u32);
        }
        out
    }
}

/// Build the partition levels (targets are filled by [`propagate_targets`]).
/// Stops early when a level fails to coarsen, reporting the achieved depth.
pub fn build_hierarchy(
    cloud: &PointCloud,
    config: &HierarchyConfig,
) -> Result<SuperpointHierarchy> {
    if config.levels < 1 {
        return Err(Error::argument("levels must be >= 1"));
    }
    if config.lambdas.len() < config.levels {
        return Err(Error::argument("need one lambda per level"));
    }
    let n = cloud.len();
    let positions = cloud.positions();
    let colors = cloud.colors();

    // Level 1 on raw points: position + color features.
    let dim = 6;
    let mut feats = Vec::with_capacity(n * dim);
    for i in 0..n {
        feats.extend_from_slice(&[
            positions[i][0] * config.pos_weight,
            positions[i][1] * config.pos_weight,
            positions[i][2] * config.pos_weight,
            colors[i][0] as f64 * config.color_weight,
            colors[i][1] as f64 * config.color_weight,
            colors[i][2] as f64 * config.color_weight,
        ]);
    }
    let graph = build_adjacency(positions, config.k_nn)?;
    let part = partition_level(&graph, &feats, dim, config.lambdas[0])?;

    let mut members = vec![Vec::new(); part.n_superpoints];
    for (i, &sp) in part.assignment.iter().enumerate() {
        members[sp as usize].push(i as u32);
    }
    let sp_geom: Vec<f64> = members
        .iter()
        .flat_map(|m| superpoint_geometry(positions, colors, m))
        .collect();
    let sp_centroids: Vec<[f64; 3]> = (0..part.n_superpoints)
        .map(|s| [sp_geom[s * SP_GEOM_DIM], sp_geom[s * SP_GEOM_DIM + 1], sp_geom[s * SP_GEOM_DIM + 2]])
        .collect();
    let (edges, edge_feats) = contract_edges(&graph.edges, &part.assignment, positions, &sp_centroids);
    let mut levels = vec![HierarchyLevel {
        parent_of: part.assignment,
        n_superpoints: part.n_superpoints,
        edges,
        edge_feats,
        sp_geom,
        lambda: config.lambdas[0],
    }];

    // Coarser levels partition the previous level's superpoints on sp_geom.
    let mut point_members = members;
    for l in 1..config.levels {
        let prev = levels.last().unwrap();
        let prev_n = prev.n_superpoints;
        if prev_n <= 1 || prev.edges.is_empty() {
            break;
        }
        let graph = Graph {
            n: prev_n,
            edges: prev.edges.clone(),
        };
        let part = partition_level(&graph, &prev.sp_geom, SP_GEOM_DIM, config.lambdas[l])?;
        if part.n_superpoints >= prev_n {
            break; // no coarsening at this lambda
        }
        let prev_centroids: Vec<[f64; 3]> = (0..prev_n).map(|s| prev.centroid(s)).collect();
        let mut new_members: Vec<Vec<u32>> = vec![Vec::new(); part.n_superpoints];
        for (child, &sp) in part.assignment.iter().enumerate() {
            new_members[sp as usize].extend(point_members[child].iter().copied());
        }
        for m in &mut new_members {
            m.sort_unstable();
        }
        let sp_geom: Vec<f64> = new_members
            .iter()
            .flat_map(|m| superpoint_geometry(positions, colors, m))
            .collect();
        let sp_centroids: Vec<[f64; 3]> = (0..part.n_superpoints)
            .map(|s| [sp_geom[s * SP_GEOM_DIM], sp_geom[s * SP_GEOM_DIM + 1], sp_geom[s * SP_GEOM_DIM + 2]])
            .collect();
        let (edges, edge_feats) =
            contract_edges(&prev.edges, &part.assignment, &prev_centroids, &sp_centroids);
        levels.push(HierarchyLevel {
            parent_of: part.assignment,
            n_superpoints: part.n_superpoints,
            edges,
            edge_feats,
            sp_geom,
            lambda: config.lambdas[l],
        });
        point_members = new_members;
    }

    Ok(SuperpointHierarchy {
        levels,
        targets: Vec::new(),
        n_points: n,
        feature_dim: 0,
        seed: config.seed,
    })
}

/// Fill the three target vectors per superpoint at every level.
///
/// Level 0 (finest): spherical k-means over member point features gives the
/// two most populous cluster centers (t1, t2); t3 is the representative vector
/// of the most frequent pseudo-class. Coarser levels run the same k-means over
/// the children's t1 (resp. t2) vectors and keep the single most populous
/// center; t3 uses the same majority rule over member superpoints.
pub fn propagate_targets(
    hierarchy: &mut SuperpointHierarchy,
    field: &FeatureField,
    labels: &PseudoLabelSet,
    target_k: usize,
    seed: u64,
) -> Result<()> {
    let dim = field.dim();
    hierarchy.feature_dim = dim;
    hierarchy.targets.clear();

    let members = hierarchy.members_at(0);
    let n_sp = hierarchy.levels[0].n_superpoints;
    let mut level0 = LevelTargets {
        vectors: vec![0.0; n_sp * 3 * dim],
        majority_class: vec![-1; n_sp],
        is_thing: vec![false; n_sp],
        masked: vec![true; n_sp],
        dim,
    };
    for (sp, mem) in members.iter().enumerate() {
        let labeled: Vec<u32> = mem
            .iter()
            .copied()
            .filter(|&p| labels.z_pc[p as usize] >= 0 && field.hit_count(p as usize) >= 1)
            .collect();
        if labeled.is_empty() {
            continue;
        }
        // Majority pseudo-class; ties resolve to the lower class id.
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for &p in &labeled {
            *counts.entry(labels.z_pc[p as usize]).or_insert(0) += 1;
        }
        let (&maj, _) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap();
        level0.majority_class[sp] = maj;
        level0.is_thing[sp] = labels.is_thing[maj as usize];
        level0.masked[sp] = false;

        let mut rows = Vec::with_capacity(labeled.len() * dim);
        for &p in &labeled {
            rows.extend(field.mean(p as usize).expect("labeled member"));
        }
        let (t1, t2) = top_two_centers(
            &rows,
            dim,
            target_k,
            derive_seed(seed, "targets0", sp as u64),
        )?;
        let base = sp * 3 * dim;
        for d in 0..dim {
            level0.vectors[base + d] = t1[d];
            level0.vectors[base + dim + d] = t2[d];
            level0.vectors[base + 2 * dim + d] = labels.class_repr[maj as usize][d] as f64;
        }
    }
    hierarchy.targets.push(level0);

    for l in 1..hierarchy.levels.len() {
        let n_sp = hierarchy.levels[l].n_superpoints;
        let prev = hierarchy.targets[l - 1].clone();
        let parent = hierarchy.levels[l].parent_of.clone();
        let mut t = LevelTargets {
            vectors: vec![0.0; n_sp * 3 * dim],
            majority_class: vec![-1; n_sp],
            is_thing: vec![false; n_sp],
            masked: vec![true; n_sp],
            dim,
        };
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_sp];
        for (child, &sp) in parent.iter().enumerate() {
            if !prev.masked[child] {
                children[sp as usize].push(child);
            }
        }
        for (sp, kids) in children.iter().enumerate() {
            if kids.is_empty() {
                continue;
            }
            let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
            for &c in kids {
                *counts.entry(prev.majority_class[c]).or_insert(0) += 1;
            }
            let (&maj, _) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .unwrap();
            t.majority_class[sp] = maj;
            t.is_thing[sp] = labels.is_thing[maj as usize];
            t.masked[sp] = false;

            let base = sp * 3 * dim;
            for which in 0..2 {
                let mut rows = Vec::with_capacity(kids.len() * dim);
                for &c in kids {
                    rows.extend(prev.target(c, which).iter().map(|&x| x as f32));
                }
                let center = top_center(
                    &rows,
                    dim,
                    target_k,
                    derive_seed(seed, "targetsN", (l * 1_000_003 + sp * 4 + which) as u64),
                )?;
                for d in 0..dim {
                    t.vectors[base + which * dim + d] = center[d];
                }
            }
            for d in 0..dim {
                t.vectors[base + 2 * dim + d] = labels.class_repr[maj as usize][d] as f64;
            }
        }
        hierarchy.targets.push(t);
    }
    Ok(())
}

/// Spherical k-means centers of the two most populous clusters (t2 falls back
/// to t1 when only one cluster is non-empty).
fn top_two_centers(rows: &[f32], dim: usize, k: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rows.len() / dim;
    let k = k.min(n).max(1);
    let km = spherical_kmeans(rows, dim, k, seed, 50, 1e-6)?;
    let sizes = km.cluster_sizes(k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let t1 = km.centroid(order[0]).to_vec();
    let t2 = order
        .get(1)
        .filter(|&&c| sizes[c] > 0)
        .map(|&c| km.centroid(c).to_vec())
        .unwrap_or_else(|| t1.clone());
    Ok((t1, t2))
}

/// Single most populous spherical k-means center.
fn top_center(rows: &[f32], dim: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    top_two_centers(rows, dim, k, seed).map(|(t1, _)| t1)
}

/// Majority pseudo-instance per level-0 superpoint (including -1 when noise
/// dominates); ties resolve to the lower id.
pub fn level0_majority_instance(
    hierarchy: &SuperpointHierarchy,
    labels: &PseudoLabelSet,
) -> Vec<i32> {
    let members = hierarchy.members_at(0);
    members
        .iter()
        .map(|mem| {
            let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
            for &p in mem {
                *counts.entry(labels.z_pi[p as usize]).or_insert(0) += 1;
            }
            counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&id, _)| id)
                .unwrap_or(-1)
        })
        .collect()
}

// --- persistence -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LevelManifest {
    n_children: usize,
    n_superpoints: usize,
    n_edges: usize,
    lambda: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyManifest {
    n_points: usize,
    feature_dim: usize,
    seed: u64,
    sp_geom_dim: usize,
    edge_feat_dim: usize,
    levels: Vec<LevelManifest>,
    has_targets: bool,
}

fn write_u32s(path: &Path, values: impl Iterator<Item = u32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(path, bytes.len() as u64, "truncated u32 array"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(path, bytes.len() as u64, "truncated f32 array"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Persist a hierarchy as a directory of binary arrays plus a JSON manifest.
/// Float arrays are stored as float32.
pub fn save_hierarchy(hierarchy: &SuperpointHierarchy, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = HierarchyManifest {
        n_points: hierarchy.n_points,
        feature_dim: hierarchy.feature_dim,
        seed: hierarchy.seed,
        sp_geom_dim: SP_GEOM_DIM,
        edge_feat_dim: EDGE_FEAT_DIM,
        levels: hierarchy
            .levels
            .iter()
            .map(|l| LevelManifest {
                n_children: l.parent_of.len(),
                n_superpoints: l.n_superpoints,
                n_edges: l.edges.len(),
                lambda: l.lambda,
            })
            .collect(),
        has_targets: !hierarchy.targets.is_empty(),
    };
    let manifest_json =
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), manifest_json)
        .map_err(|e| Error::io(dir.join("manifest.json"), e))?;

    for (l, level) in hierarchy.levels.iter().enumerate() {
        let ldir = dir.join(format!("level_{l:02}"));
        std::fs::create_dir_all(&ldir).map_err(|e| Error::io(&ldir, e))?;
        write_u32s(&ldir.join("parent_of.bin"), level.parent_of.iter().copied())?;
        write_u32s(
            &ldir.join("edges.bin"),
            level.edges.iter().flat_map(|&(a, b)| [a, b]),
        )?;
        write_f32s(
            &ldir.join("edge_feats.bin"),
            level.edge_feats.iter().map(|&x| x as f32),
        )?;
        write_f32s(
            &ldir.join("sp_geom.bin"),
            level.sp_geom.iter().map(|&x| x as f32),
        )?;
        if let Some(t) = hierarchy.targets.get(l) {
            write_f32s(
                &ldir.join("targets.bin"),
                t.vectors.iter().map(|&x| x as f32),
            )?;
            write_u32s(
                &ldir.join("target_class.bin"),
                t.majority_class.iter().map(|&c| c as u32),
            )?;
            let flags: Vec<u8> = t
                .is_thing
                .iter()
                .zip(&t.masked)
                .map(|(&thing, &masked)| (thing as u8) | ((masked as u8) << 1))
                .collect();
            std::fs::write(ldir.join("target_flags.bin"), &flags)
                .map_err(|e| Error::io(ldir.join("target_flags.bin"), e))?;
        }
    }
    Ok(())
}

pub fn load_hierarchy(dir: &Path) -> Result<SuperpointHierarchy> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: HierarchyManifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&manifest_path, 0, format!("bad manifest: {e}")))?;
    if manifest.sp_geom_dim != SP_GEOM_DIM || manifest.edge_feat_dim != EDGE_FEAT_DIM {
        return Err(Error::parse(&manifest_path, 0, "incompatible feature dims"));
    }
    let mut levels = Vec::new();
    let mut targets = Vec::new();
    for (l, lm) in manifest.levels.iter().enumerate() {
        let ldir = dir.join(format!("level_{l:02}"));
        let parent_of = read_u32s(&ldir.join("parent_of.bin"))?;
        if parent_of.len() != lm.n_children {
            return Err(Error::parse(&ldir.join("parent_of.bin"), 0, "size mismatch"));
        }
        let flat_edges = read_u32s(&ldir.join("edges.bin"))?;
        let edges: Vec<(u32, u32)> = flat_edges
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let edge_feats: Vec<f64> = read_f32s(&ldir.join("edge_feats.bin"))?
            .into_iter()
            .map(|x| x as f64)
            .collect();
        let sp_geom: Vec<f64> = read_f32s(&ldir.join("sp_geom.bin"))?
            .into_iter()
            .map(|x| x as f64)
            .collect();
        levels.push(HierarchyLevel {
            parent_of,
            n_superpoints: lm.n_superpoints,
            edges,
            edge_feats,
            sp_geom,
            lambda: lm.lambda,
        });
        if manifest.has_targets {
            let vectors: Vec<f64> = read_f32s(&ldir.join("targets.bin"))?
                .into_iter()
                .map(|x| x as f64)
                .collect();
            let majority_class: Vec<i32> = read_u32s(&ldir.join("target_class.bin"))?
                .into_iter()
                .map(|c| c as i32)
                .collect();
            let flag_path = ldir.join("target_flags.bin");
            let flags = std::fs::read(&flag_path).map_err(|e| Error::io(&flag_path, e))?;
            targets.push(LevelTargets {
                vectors,
                majority_class: majority_class.clone(),
                is_thing: flags.iter().map(|f| f & 1 != 0).collect(),
                masked: flags.iter().map(|f| f & 2 != 0).collect(),
                dim: manifest.feature_dim,
            });
        }
    }
    Ok(SuperpointHierarchy {
        levels,
        targets,
        n_points: manifest.n_points,
        feature_dim: manifest.feature_dim,
        seed: manifest.seed,
    })
}
