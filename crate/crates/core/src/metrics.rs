//! Tree metrics: curve skeletons, branch decomposition, tree-length and
//! branch detection rates, and Dice overlap.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::phantom::{rasterize_polyline, CenterlineBranch};
use crate::volcore::{label_components, largest_component, neighbor, unravel, Connectivity, Volume};

/// Offsets of the 3×3×3 cube in `(dz, dy, dx)` order; index 13 is the centre.
fn cube_offsets() -> [[isize; 3]; 27] {
    let mut out = [[0isize; 3]; 27];
    for (i, o) in out.iter_mut().enumerate() {
        *o = [(i / 9) as isize - 1, ((i / 3) % 3) as isize - 1, (i % 3) as isize - 1];
    }
    out
}

/// Cube positions adjacent under 26- and 6-connectivity.
struct CubeGraph {
    adj26: Vec<Vec<usize>>,
    adj6: Vec<Vec<usize>>,
    n18: [bool; 27],
    face: [bool; 27],
}

impl CubeGraph {
    fn new() -> Self {
        let off = cube_offsets();
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6 = vec![Vec::new(); 27];
        let mut n18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let nz = off[i].iter().filter(|v| **v != 0).count();
            n18[i] = (1..=2).contains(&nz);
            face[i] = nz == 1;
            for j in 0..27 {
                if i == j || i == 13 || j == 13 {
                    continue;
                }
                let d: Vec<isize> = (0..3).map(|k| (off[i][k] - off[j][k]).abs()).collect();
                if d.iter().all(|v| *v <= 1) {
                    adj26[i].push(j);
                    if d.iter().sum::<isize>() == 1 {
                        adj6[i].push(j);
                    }
                }
            }
        }
        CubeGraph { adj26, adj6, n18, face }
    }

    /// A foreground voxel is simple when its removal keeps the foreground
    /// 26-components and background 6-components unchanged: the 26-neighbours
    /// form one 26-component and the background of the 18-neighbourhood
    /// touching the centre forms one 6-component.
    fn is_simple(&self, cube: &[bool; 27]) -> bool {
        let mut seen = [false; 27];
        let mut fg_components = 0;
        for s in 0..27 {
            if s == 13 || !cube[s] || seen[s] {
                continue;
            }
            fg_components += 1;
            if fg_components > 1 {
                return false;
            }
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                for &j in &self.adj26[i] {
                    if cube[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if fg_components != 1 {
            return false;
        }
        let mut seen = [false; 27];
        let mut bg_components = 0;
        for s in 0..27 {
            if !self.face[s] || cube[s] || seen[s] {
                continue;
            }
            bg_components += 1;
            if bg_components > 1 {
                return false;
            }
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                for &j in &self.adj6[i] {
                    if self.n18[j] && !cube[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        bg_components == 1
    }
}

/// Grid with a one-voxel background border so every voxel has a full cube.
struct Padded {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Padded {
    fn new(mask: &[u8], shape: [usize; 3]) -> Self {
        let dims = [shape[0] + 2, shape[1] + 2, shape[2] + 2];
        let mut data = vec![false; dims.iter().product()];
        for (i, &m) in mask.iter().enumerate() {
            let (z, y, x) = unravel(shape, i);
            data[((z + 1) * dims[1] + y + 1) * dims[2] + x + 1] = m != 0;
        }
        Padded { dims, data }
    }

    fn strides(&self) -> [isize; 3] {
        [(self.dims[1] * self.dims[2]) as isize, self.dims[2] as isize, 1]
    }

    fn cube(&self, i: usize, off: &[[isize; 3]; 27]) -> [bool; 27] {
        let s = self.strides();
        let mut c = [false; 27];
        for (k, o) in off.iter().enumerate() {
            c[k] = self.data[(i as isize + o[0] * s[0] + o[1] * s[1] + o[2] * s[2]) as usize];
        }
        c
    }

    fn unpad(&self, shape: [usize; 3]) -> Vec<u8> {
        let mut out = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    out.push(u8::from(self.data[((z + 1) * self.dims[1] + y + 1) * self.dims[2] + x + 1]));
                }
            }
        }
        out
    }
}

/// Topology-preserving thinning to a one-voxel-wide centreline.
///
/// Each pass visits the six face directions in turn; a voxel is removed
/// when its neighbour in that direction is background, it has more than one
/// 26-neighbour (so curve ends survive) and it is simple. Candidates of a
/// sub-iteration are re-checked one by one in raster order before removal.
pub fn skeletonize(mask: &[u8], shape: [usize; 3]) -> Result<Vec<u8>> {
    if mask.len() != shape.iter().product::<usize>() {
        return Err(FdaError::Shape(format!("mask length does not match shape {shape:?}")));
    }
    if !mask.iter().any(|&m| m != 0) {
        return Err(FdaError::Empty("cannot skeletonize an empty mask".into()));
    }
    let off = cube_offsets();
    let graph = CubeGraph::new();
    let mut g = Padded::new(mask, shape);
    let s = g.strides();
    let dirs: [isize; 6] = [-s[0], s[0], -s[1], s[1], -s[2], s[2]];
    let count = |c: &[bool; 27]| c.iter().enumerate().filter(|(k, v)| *k != 13 && **v).count();
    loop {
        let mut changed = false;
        for &d in &dirs {
            let mut candidates = Vec::new();
            for i in 0..g.data.len() {
                if !g.data[i] || g.data[(i as isize + d) as usize] {
                    continue;
                }
                let c = g.cube(i, &off);
                if count(&c) > 1 && graph.is_simple(&c) {
                    candidates.push(i);
                }
            }
            for i in candidates {
                let c = g.cube(i, &off);
                if count(&c) > 1 && graph.is_simple(&c) {
                    g.data[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(g.unpad(shape))
}

/// Euler characteristic of the union of closed unit cubes at the foreground
/// voxels (components − tunnels + cavities).
pub fn euler_characteristic(mask: &[u8], shape: [usize; 3]) -> i64 {
    let [d, h, w] = shape;
    let fg = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[(z as usize * h + y as usize) * w + x as usize] != 0
    };
    // A lattice cell of dimension k at doubled coordinates is present when
    // any voxel containing it is foreground.
    let mut chi = 0i64;
    for z in 0..=(2 * d) as isize {
        for y in 0..=(2 * h) as isize {
            for x in 0..=(2 * w) as isize {
                let c = [z, y, x];
                let dim = c.iter().filter(|v| *v % 2 != 0).count();
                let ranges: Vec<Vec<isize>> =
                    c.iter().map(|&v| if v % 2 != 0 { vec![(v - 1) / 2] } else { vec![v / 2 - 1, v / 2] }).collect();
                let mut present = false;
                'outer: for &vz in &ranges[0] {
                    for &vy in &ranges[1] {
                        for &vx in &ranges[2] {
                            if fg(vz, vy, vx) {
                                present = true;
                                break 'outer;
                            }
                        }
                    }
                }
                if present {
                    chi += if dim % 2 == 0 { 1 } else { -1 };
                }
            }
        }
    }
    chi
}

/// One branch: an ordered voxel path between two nodes of the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub voxels: Vec<[usize; 3]>,
    /// Sum of Euclidean gaps between consecutive voxels, in millimetres.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSet {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub branches: Vec<Branch>,
}

fn gap(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
}

fn path_length(voxels: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    voxels.windows(2).map(|p| gap(p[0], p[1], spacing)).sum()
}

impl BranchSet {
    /// Branches from known centreline polylines, rasterised onto the grid.
    pub fn from_centerline(centerline: &[CenterlineBranch], shape: [usize; 3], spacing: [f64; 3]) -> Self {
        let branches = centerline
            .iter()
            .map(|b| {
                let voxels = rasterize_polyline(&b.points, shape);
                Branch { length: path_length(&voxels, spacing), voxels }
            })
            .filter(|b| b.length > 0.0)
            .collect();
        BranchSet { shape, spacing, branches }
    }

    pub fn total_length(&self) -> f64 {
        self.branches.iter().map(|b| b.length).sum()
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

fn flat(shape: [usize; 3], v: [usize; 3]) -> usize {
    (v[0] * shape[1] + v[1]) * shape[2] + v[2]
}

fn skeleton_neighbors(skel: &[u8], shape: [usize; 3], i: usize, offs: &[[isize; 3]]) -> Vec<usize> {
    let (z, y, x) = unravel(shape, i);
    offs.iter().filter_map(|o| neighbor(shape, z, y, x, *o)).filter(|&j| skel[j] != 0).collect()
}

/// Splits a skeleton into branches. Nodes are voxels whose number of
/// skeleton 26-neighbours differs from two; adjacent junction voxels form a
/// single node. Each branch runs from a node through degree-2 voxels to the
/// next node.
pub fn parse_branches(skel: &[u8], shape: [usize; 3], spacing: [f64; 3]) -> BranchSet {
    let offs = Connectivity::TwentySix.offsets();
    let n = skel.len();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        if skel[i] != 0 {
            degree[i] = skeleton_neighbors(skel, shape, i, &offs).len();
        }
    }
    let junction: Vec<u8> = (0..n).map(|i| u8::from(skel[i] != 0 && degree[i] >= 3)).collect();
    let (jlabel, _) = label_components(&junction, shape, Connectivity::TwentySix);
    // node id: junction cluster label, or a fresh id for endpoints
    let mut node = vec![0u32; n];
    let mut next = jlabel.iter().copied().max().unwrap_or(0) + 1;
    for i in 0..n {
        if skel[i] == 0 || degree[i] == 2 {
            continue;
        }
        node[i] = if jlabel[i] != 0 {
            jlabel[i]
        } else {
            next += 1;
            next - 1
        };
    }
    let mut visited = vec![false; n];
    let mut direct: HashSet<(u32, u32)> = HashSet::new();
    let mut branches = Vec::new();
    let walk = |start: usize, first: usize, visited: &mut Vec<bool>| -> Vec<usize> {
        let mut path = vec![start, first];
        let (mut prev, mut cur) = (start, first);
        while node[cur] == 0 {
            visited[cur] = true;
            let nb = skeleton_neighbors(skel, shape, cur, &offs);
            let Some(&nxt) = nb.iter().find(|&&j| j != prev && !(visited[j] && node[j] == 0)) else { break };
            path.push(nxt);
            prev = cur;
            cur = nxt;
        }
        path
    };
    for i in 0..n {
        if node[i] == 0 {
            continue;
        }
        for j in skeleton_neighbors(skel, shape, i, &offs) {
            if node[j] != 0 {
                if node[j] == node[i] {
                    continue;
                }
                let key = (node[i].min(node[j]), node[i].max(node[j]));
                if direct.insert(key) {
                    branches.push(vec![i, j]);
                }
                continue;
            }
            if visited[j] {
                continue;
            }
            branches.push(walk(i, j, &mut visited));
        }
    }
    // closed loops without any node
    for i in 0..n {
        if skel[i] != 0 && node[i] == 0 && !visited[i] {
            let nb = skeleton_neighbors(skel, shape, i, &offs);
            visited[i] = true;
            let mut path = walk(i, nb[0], &mut visited);
            path.push(i);
            branches.push(path);
        }
    }
    let branches = branches
        .into_iter()
        .map(|p| {
            let voxels: Vec<[usize; 3]> = p
                .into_iter()
                .map(|i| {
                    let (z, y, x) = unravel(shape, i);
                    [z, y, x]
                })
                .collect();
            Branch { length: path_length(&voxels, spacing), voxels }
        })
        .filter(|b| b.length > 0.0)
        .collect();
    BranchSet { shape, spacing, branches }
}

/// Removes terminal branches shorter than `min_length` (mm), keeping their
/// junction voxel, until none remain. A lone branch is never removed.
pub fn prune_spurs(skel: &[u8], shape: [usize; 3], spacing: [f64; 3], min_length: f64) -> Vec<u8> {
    let offs = Connectivity::TwentySix.offsets();
    let mut s = skel.to_vec();
    loop {
        let set = parse_branches(&s, shape, spacing);
        if set.len() <= 1 {
            return s;
        }
        let deg = |s: &[u8], v: [usize; 3]| skeleton_neighbors(s, shape, flat(shape, v), &offs).len();
        let mut removed = false;
        for b in &set.branches {
            if b.length >= min_length {
                continue;
            }
            let (a, z) = (b.voxels[0], b.voxels[b.voxels.len() - 1]);
            let (da, dz) = (deg(&s, a), deg(&s, z));
            let tail: Vec<[usize; 3]> = if da == 1 && dz >= 3 {
                b.voxels[..b.voxels.len() - 1].to_vec()
            } else if dz == 1 && da >= 3 {
                b.voxels[1..].to_vec()
            } else {
                continue;
            };
            for v in tail {
                s[flat(shape, v)] = 0;
            }
            removed = true;
            break;
        }
        if !removed {
            return s;
        }
    }
}

/// Percentage of centreline length whose segments have both end voxels
/// inside `pred`.
pub fn length_rate(gt: &BranchSet, pred: &[u8]) -> Result<f64> {
    let total = gt.total_length();
    if total <= 0.0 {
        return Err(FdaError::Empty("ground-truth centreline has zero length".into()));
    }
    let inside = |v: [usize; 3]| pred[flat(gt.shape, v)] != 0;
    // summed per branch in the same order as the branch lengths and divided
    // before scaling, so full coverage gives exactly 100
    let mut hit = 0.0;
    for b in &gt.branches {
        let mut branch = 0.0;
        for p in b.voxels.windows(2) {
            if inside(p[0]) && inside(p[1]) {
                branch += gap(p[0], p[1], gt.spacing);
            }
        }
        hit += branch;
    }
    Ok(100.0 * (hit / total))
}

/// Per-branch detection flags: a branch counts when at least `frac` of its
/// voxels lie inside `pred`.
pub fn branch_flags(gt: &BranchSet, pred: &[u8], frac: f64) -> Vec<bool> {
    gt.branches
        .iter()
        .map(|b| {
            let inside = b.voxels.iter().filter(|v| pred[flat(gt.shape, **v)] != 0).count();
            inside as f64 >= frac * b.voxels.len() as f64
        })
        .collect()
}

pub fn branch_rate(gt: &BranchSet, pred: &[u8], frac: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(FdaError::Empty("ground truth has no branches".into()));
    }
    let flags = branch_flags(gt, pred, frac);
    Ok(100.0 * flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
}

/// `100 · 2|P ∩ G| / (|P| + |G|)`, and 100 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (*p != 0, *g != 0);
        inter += usize::from(p && g);
        sp += usize::from(p);
        sg += usize::from(g);
    }
    if sp + sg == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (sp + sg) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Fraction of a branch's voxels that must be covered to detect it.
    pub branch_frac: f64,
    /// Terminal skeleton branches shorter than this (mm) are pruned when the
    /// centreline is derived from the mask.
    pub min_spur_length: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { branch_frac: 0.8, min_spur_length: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub length_rate: f64,
    pub branch_rate: f64,
    pub dsc: f64,
    pub branch_detected: Vec<bool>,
    pub gt_branch_count: usize,
    pub gt_total_length: f64,
    pub branch_frac: f64,
}

/// Centreline of a mask by thinning, spur pruning and branch parsing.
pub fn centerline_from_mask(mask: &[u8], shape: [usize; 3], spacing: [f64; 3], min_spur: f64) -> Result<BranchSet> {
    let skel = skeletonize(mask, shape)?;
    let skel = prune_spurs(&skel, shape, spacing, min_spur);
    Ok(parse_branches(&skel, shape, spacing))
}

/// Scores `pred` against `gt` after keeping only the largest component of
/// `pred`. The reference centreline is `centerline` when given, otherwise it
/// is derived from `gt`.
pub fn evaluate(
    pred: &Volume,
    gt: &Volume,
    centerline: Option<&[CenterlineBranch]>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(FdaError::Shape(format!("prediction {:?} and reference {:?} differ", pred.shape(), gt.shape())));
    }
    let pred = largest_component(pred, Connectivity::TwentySix)?;
    let p = pred.as_mask()?;
    let g = gt.as_mask()?;
    let tree = match centerline {
        Some(c) => BranchSet::from_centerline(c, gt.shape(), gt.spacing()),
        None => centerline_from_mask(g, gt.shape(), gt.spacing(), cfg.min_spur_length)?,
    };
    let flags = branch_flags(&tree, p, cfg.branch_frac);
    Ok(MetricsReport {
        length_rate: length_rate(&tree, p)?,
        branch_rate: branch_rate(&tree, p, cfg.branch_frac)?,
        dsc: dsc(p, g),
        branch_detected: flags,
        gt_branch_count: tree.len(),
        gt_total_length: tree.total_length(),
        branch_frac: cfg.branch_frac,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub length_rate: f64,
    pub branch_rate: f64,
    pub dsc: f64,
}

/// Mean of each rate over several reports.
pub fn mean_report(reports: &[MetricsReport]) -> MeanMetrics {
    let n = reports.len().max(1) as f64;
    MeanMetrics {
        length_rate: reports.iter().map(|r| r.length_rate).sum::<f64>() / n,
        branch_rate: reports.iter().map(|r| r.branch_rate).sum::<f64>() / n,
        dsc: reports.iter().map(|r| r.dsc).sum::<f64>() / n,
    }
}
