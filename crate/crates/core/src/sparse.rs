//! Sparse voxel coordinate algebra.
//!
//! Coordinates are always stored at stride-1 resolution, so a grid at stride
//! `s` only holds multiples of `s` (the Minkowski-engine convention). Kernel
//! offsets at stride `s` are therefore multiples of `s` as well.
//!
//! Two convolution coordinate rules are modelled:
//!
//! * [`conv_coords_standard`] keeps the active set fixed (only downsampling
//!   changes it), so disconnected blobs stay disconnected however deep the
//!   network is.
//! * [`cec_expand`] dilates the active set by the kernel footprint, letting
//!   receptive fields of separate blobs merge and filling hollow object
//!   centers. [`cec_contract`] maps an expanded grid back onto a reference
//!   coordinate set.
//!
//! Features are propagated with a plain neighbourhood mean; there are no
//! learned weights here.

use crate::geometry::{BBox, TimedPointCloud};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

/// Integer voxel coordinate at stride-1 resolution. `z` is 0 for 2D grids.
pub type Coord = [i64; 3];

/// Default voxel edge length in meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.4;

/// Width of the feature vector produced by [`voxelize`].
pub const VOXEL_FEATURE_WIDTH: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensionality must be 2 or 3, got {0}")]
    BadDims(u8),
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("stride must be positive, got {0}")]
    BadStride(i64),
    #[error("kernel size must be odd and at least {min}, got {kernel}")]
    BadKernel { kernel: usize, min: usize },
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord(Coord),
    #[error("coordinate {coord:?} is not a multiple of stride {stride}")]
    Misaligned { coord: Coord, stride: i64 },
    #[error("feature width mismatch: expected {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("stride {from} cannot be mapped onto stride {to}")]
    StrideMismatch { from: i64, to: i64 },
    #[error("dimensionality mismatch: {0} vs {1}")]
    DimsMismatch(u8, u8),
    #[error("operation requires a 2D grid")]
    Not2d,
}

/// Set of active voxel coordinates with one feature vector each.
///
/// Coordinates are kept sorted, so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGrid {
    dims: u8,
    stride: i64,
    voxel_size: f64,
    feature_width: usize,
    coords: Vec<Coord>,
    features: Vec<Vec<f64>>,
    #[serde(skip)]
    index: HashMap<Coord, usize>,
}

impl SparseGrid {
    pub fn empty(dims: u8, stride: i64, voxel_size: f64, feature_width: usize) -> Result<Self, GridError> {
        Self::from_entries(dims, stride, voxel_size, feature_width, Vec::new())
    }

    /// Builds a grid from `(coord, feature)` pairs, validating every invariant.
    pub fn from_entries(
        dims: u8,
        stride: i64,
        voxel_size: f64,
        feature_width: usize,
        mut entries: Vec<(Coord, Vec<f64>)>,
    ) -> Result<Self, GridError> {
        if dims != 2 && dims != 3 {
            return Err(GridError::BadDims(dims));
        }
        if stride <= 0 {
            return Err(GridError::BadStride(stride));
        }
        if !(voxel_size > 0.0) {
            return Err(GridError::BadVoxelSize(voxel_size));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(GridError::DuplicateCoord(pair[0].0));
            }
        }
        for (c, f) in &entries {
            if c.iter().any(|v| v.rem_euclid(stride) != 0) || (dims == 2 && c[2] != 0) {
                return Err(GridError::Misaligned { coord: *c, stride });
            }
            if f.len() != feature_width {
                return Err(GridError::FeatureWidth { expected: feature_width, got: f.len() });
            }
        }
        let (coords, features): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Ok(Self::assemble(dims, stride, voxel_size, feature_width, coords, features))
    }

    /// Coordinate-only grid with zero-width features.
    pub fn from_coords(dims: u8, stride: i64, voxel_size: f64, coords: impl IntoIterator<Item = Coord>) -> Result<Self, GridError> {
        let entries = coords.into_iter().map(|c| (c, Vec::new())).collect();
        Self::from_entries(dims, stride, voxel_size, 0, entries)
    }

    // Callers guarantee sorted, unique, aligned coordinates.
    fn assemble(dims: u8, stride: i64, voxel_size: f64, feature_width: usize, coords: Vec<Coord>, features: Vec<Vec<f64>>) -> Self {
        let index = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Self { dims, stride, voxel_size, feature_width, coords, features, index }
    }

    pub fn dims(&self) -> u8 {
        self.dims
    }

    pub fn stride(&self) -> i64 {
        self.stride
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.index.contains_key(c)
    }

    pub fn feature(&self, c: &Coord) -> Option<&[f64]> {
        self.index.get(c).map(|&i| self.features[i].as_slice())
    }

    /// Cell (at this grid's stride) containing a metric position.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Coord {
        let snap = |v: f64| {
            let c = (v / self.voxel_size).floor() as i64;
            c.div_euclid(self.stride) * self.stride
        };
        if self.dims == 2 {
            [snap(x), snap(y), 0]
        } else {
            [snap(x), snap(y), snap(z)]
        }
    }

    /// Line-oriented text dump, one coordinate per line:
    /// `stride c0 c1 [c2] | f0 f1 ...`.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for (c, f) in self.coords.iter().zip(&self.features) {
            let _ = write!(out, "{}", self.stride);
            for v in &c[..self.dims as usize] {
                let _ = write!(out, " {v}");
            }
            out.push_str(" |");
            for v in f {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    /// Restores the lookup index after deserialization.
    pub fn reindexed(mut self) -> Self {
        self.index = self.coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        self
    }
}

fn kernel_offsets(dims: u8, radius: i64) -> Vec<[i64; 3]> {
    let zr = if dims == 3 { radius } else { 0 };
    let mut offs = Vec::new();
    for dx in -radius..=radius {
        for dy in -radius..=radius {
            for dz in -zr..=zr {
                offs.push([dx, dy, dz]);
            }
        }
    }
    offs
}

fn check_kernel(kernel: usize, min: usize) -> Result<i64, GridError> {
    if kernel < min || kernel % 2 == 0 {
        return Err(GridError::BadKernel { kernel, min });
    }
    Ok(((kernel - 1) / 2) as i64)
}

fn mean_into(acc: &mut [f64], n: usize) {
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Discretizes a point cloud into a stride-1 grid.
///
/// Per-voxel features: `[count, mean offset x, y, z, min t, max t, free fraction]`.
/// Offsets are relative to the voxel center; for 2D grids the `z` slot holds
/// the mean absolute height instead.
pub fn voxelize(pc: &TimedPointCloud, voxel_size: f64, dims: u8) -> Result<SparseGrid, GridError> {
    if dims != 2 && dims != 3 {
        return Err(GridError::BadDims(dims));
    }
    if !(voxel_size > 0.0) {
        return Err(GridError::BadVoxelSize(voxel_size));
    }
    struct Acc {
        n: usize,
        sum: [f64; 3],
        t_min: f64,
        t_max: f64,
        free: usize,
    }
    let mut cells: HashMap<Coord, Acc> = HashMap::new();
    for p in &pc.points {
        let cx = (p.x / voxel_size).floor() as i64;
        let cy = (p.y / voxel_size).floor() as i64;
        let cz = if dims == 3 { (p.z / voxel_size).floor() as i64 } else { 0 };
        let acc = cells.entry([cx, cy, cz]).or_insert(Acc {
            n: 0,
            sum: [0.0; 3],
            t_min: f64::INFINITY,
            t_max: f64::NEG_INFINITY,
            free: 0,
        });
        acc.n += 1;
        acc.sum[0] += p.x;
        acc.sum[1] += p.y;
        acc.sum[2] += p.z;
        acc.t_min = acc.t_min.min(p.t);
        acc.t_max = acc.t_max.max(p.t);
        acc.free += usize::from(p.free);
    }
    let mut coords: Vec<Coord> = cells.keys().copied().collect();
    coords.sort_unstable();
    let features = coords
        .iter()
        .map(|c| {
            let a = &cells[c];
            let n = a.n as f64;
            let center = |i: usize| (c[i] as f64 + 0.5) * voxel_size;
            let oz = if dims == 3 { a.sum[2] / n - center(2) } else { a.sum[2] / n };
            vec![n, a.sum[0] / n - center(0), a.sum[1] / n - center(1), oz, a.t_min, a.t_max, a.free as f64 / n]
        })
        .collect();
    Ok(SparseGrid::assemble(dims, 1, voxel_size, VOXEL_FEATURE_WIDTH, coords, features))
}

/// Coordinate rule of an ordinary (submanifold / strided) sparse convolution.
///
/// The output set is the input set, floor-downsampled to `stride_out`.
/// Each output feature is the mean over active inputs inside the kernel
/// window around the output cell.
pub fn conv_coords_standard(g: &SparseGrid, kernel: usize, stride_out: i64) -> Result<SparseGrid, GridError> {
    let radius = check_kernel(kernel, 1)?;
    if stride_out <= 0 || stride_out % g.stride != 0 {
        return Err(GridError::StrideMismatch { from: g.stride, to: stride_out });
    }
    let down = |v: i64| v.div_euclid(stride_out) * stride_out;
    let mut coords: Vec<Coord> = g
        .coords
        .iter()
        .map(|c| if g.dims == 3 { [down(c[0]), down(c[1]), down(c[2])] } else { [down(c[0]), down(c[1]), 0] })
        .collect();
    coords.sort_unstable();
    coords.dedup();

    // window in input cells: [o - r·s_in, o + s_out - s_in + r·s_in]
    let lo = -radius * g.stride;
    let hi = stride_out - g.stride + radius * g.stride;
    let span: Vec<i64> = (lo..=hi).step_by(g.stride as usize).collect();
    let zspan: Vec<i64> = if g.dims == 3 { span.clone() } else { vec![0] };
    let features = coords
        .iter()
        .map(|o| {
            let mut acc = vec![0.0; g.feature_width];
            let mut n = 0;
            for &dx in &span {
                for &dy in &span {
                    for &dz in &zspan {
                        if let Some(f) = g.feature(&[o[0] + dx, o[1] + dy, o[2] + dz]) {
                            acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                            n += 1;
                        }
                    }
                }
            }
            mean_into(&mut acc, n);
            acc
        })
        .collect();
    Ok(SparseGrid::assemble(g.dims, stride_out, g.voxel_size, g.feature_width, coords, features))
}

/// Coordinate-expandable convolution: the output set is the Minkowski
/// dilation of the input set by the full `kernel` footprint.
///
/// Every output feature is the mean over the active inputs in its footprint,
/// so original coordinates keep a value and new ones inherit from their
/// neighbours.
pub fn cec_expand(g: &SparseGrid, kernel: usize) -> Result<SparseGrid, GridError> {
    let radius = check_kernel(kernel, 3)?;
    let offsets: Vec<Coord> = kernel_offsets(g.dims, radius)
        .into_iter()
        .map(|o| o.map(|v| v * g.stride))
        .collect();
    let mut coords: Vec<Coord> = Vec::with_capacity(g.len() * offsets.len());
    for c in &g.coords {
        for o in &offsets {
            coords.push([c[0] + o[0], c[1] + o[1], c[2] + o[2]]);
        }
    }
    coords.sort_unstable();
    coords.dedup();
    let features = coords
        .iter()
        .map(|c| {
            let mut acc = vec![0.0; g.feature_width];
            let mut n = 0;
            for o in &offsets {
                if let Some(f) = g.feature(&[c[0] - o[0], c[1] - o[1], c[2] - o[2]]) {
                    acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                    n += 1;
                }
            }
            mean_into(&mut acc, n);
            acc
        })
        .collect();
    Ok(SparseGrid::assemble(g.dims, g.stride, g.voxel_size, g.feature_width, coords, features))
}

/// Contracts `g` onto exactly the coordinates of `reference`.
///
/// `g` may be at the reference stride or at a coarser multiple of it (the
/// transposed-convolution case); each reference coordinate reads the feature
/// of its parent cell in `g`, or a zero vector when that cell is inactive.
pub fn cec_contract(g: &SparseGrid, reference: &SparseGrid) -> Result<SparseGrid, GridError> {
    if g.dims != reference.dims {
        return Err(GridError::DimsMismatch(g.dims, reference.dims));
    }
    if g.stride % reference.stride != 0 {
        return Err(GridError::StrideMismatch { from: g.stride, to: reference.stride });
    }
    let up = |v: i64| v.div_euclid(g.stride) * g.stride;
    let features = reference
        .coords
        .iter()
        .map(|c| {
            let parent = [up(c[0]), up(c[1]), up(c[2])];
            g.feature(&parent).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.feature_width])
        })
        .collect();
    Ok(SparseGrid::assemble(
        reference.dims,
        reference.stride,
        reference.voxel_size,
        g.feature_width,
        reference.coords.clone(),
        features,
    ))
}

/// Collapses a 3D grid onto its BEV plane, averaging features along `z`.
pub fn project_bev(g: &SparseGrid) -> SparseGrid {
    if g.dims == 2 {
        return g.clone();
    }
    let mut cols: HashMap<Coord, (Vec<f64>, usize)> = HashMap::new();
    for (c, f) in g.coords.iter().zip(&g.features) {
        let e = cols.entry([c[0], c[1], 0]).or_insert_with(|| (vec![0.0; g.feature_width], 0));
        e.0.iter_mut().zip(f).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    let mut coords: Vec<Coord> = cols.keys().copied().collect();
    coords.sort_unstable();
    let features = coords
        .iter()
        .map(|c| {
            let (mut acc, n) = cols[c].clone();
            mean_into(&mut acc, n);
            acc
        })
        .collect();
    SparseGrid::assemble(2, g.stride, g.voxel_size, g.feature_width, coords, features)
}

/// Connected-component summary of a grid's active set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub component_count: usize,
    /// Sizes ordered by each component's smallest coordinate.
    pub component_sizes: Vec<usize>,
    /// Over all components, the largest Chebyshev distance (in stride units)
    /// to the nearest other component. 0 for fewer than two components.
    pub largest_gap: i64,
}

// above this many bounding-box cells the gap search falls back to pairwise
const FLOOD_CELL_LIMIT: i64 = 1 << 25;

/// Components under Chebyshev adjacency (8-neighbourhood in 2D, 26 in 3D),
/// measured in units of the grid stride.
pub fn connectivity(g: &SparseGrid) -> ConnectivityReport {
    let cells: Vec<Coord> = g.coords.iter().map(|c| c.map(|v| v / g.stride)).collect();
    let lookup: HashMap<Coord, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let offsets: Vec<Coord> = kernel_offsets(g.dims, 1).into_iter().filter(|o| *o != [0, 0, 0]).collect();

    let mut label = vec![usize::MAX; cells.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..cells.len() {
        if label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        label[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = cells[i];
            for o in &offsets {
                if let Some(&j) = lookup.get(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]) {
                    if label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    let largest_gap = if sizes.len() < 2 { 0 } else { largest_gap(&cells, &label, sizes.len(), &offsets) };
    ConnectivityReport { component_count: sizes.len(), component_sizes: sizes, largest_gap }
}

fn largest_gap(cells: &[Coord], label: &[usize], n_comp: usize, offsets: &[Coord]) -> i64 {
    let mut lo = cells[0];
    let mut hi = cells[0];
    for c in cells {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let ext = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let volume = ext[0].saturating_mul(ext[1]).saturating_mul(ext[2]);
    let mut nearest = vec![i64::MAX; n_comp];
    if volume > FLOOD_CELL_LIMIT {
        for i in 0..cells.len() {
            for j in (i + 1)..cells.len() {
                if label[i] != label[j] {
                    let d = chebyshev(&cells[i], &cells[j]);
                    nearest[label[i]] = nearest[label[i]].min(d);
                    nearest[label[j]] = nearest[label[j]].min(d);
                }
            }
        }
        return nearest.into_iter().max().unwrap_or(0);
    }

    // Multi-source BFS inside the bounding box: every cell gets the label of
    // its Chebyshev-nearest component. Where two floods touch, d_p + d_q + 1
    // is a path length between the components, and the minimum over all
    // touching pairs is exact.
    let flat = |c: &Coord| ((c[0] - lo[0]) * ext[1] + (c[1] - lo[1])) * ext[2] + (c[2] - lo[2]);
    let mut owner = vec![u32::MAX; volume as usize];
    let mut dist = vec![0u32; volume as usize];
    let mut queue: VecDeque<Coord> = VecDeque::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        owner[flat(c) as usize] = label[i] as u32;
        queue.push_back(*c);
    }
    while let Some(c) = queue.pop_front() {
        let ci = flat(&c) as usize;
        let (lc, dc) = (owner[ci], dist[ci]);
        for o in offsets {
            let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if (0..3).any(|k| n[k] < lo[k] || n[k] > hi[k]) {
                continue;
            }
            let ni = flat(&n) as usize;
            if owner[ni] == u32::MAX {
                owner[ni] = lc;
                dist[ni] = dc + 1;
                queue.push_back(n);
            } else if owner[ni] != lc {
                let d = (dc + dist[ni] + 1) as i64;
                let (a, b) = (lc as usize, owner[ni] as usize);
                nearest[a] = nearest[a].min(d);
                nearest[b] = nearest[b].min(d);
            }
        }
    }
    nearest.into_iter().max().unwrap_or(0)
}

fn chebyshev(a: &Coord, b: &Coord) -> i64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).max().unwrap_or(0)
}

/// Fraction of boxes whose center cell is active in a 2D grid.
///
/// An empty box list counts as fully covered.
pub fn center_coverage(g: &SparseGrid, boxes: &[BBox]) -> Result<f64, GridError> {
    if g.dims != 2 {
        return Err(GridError::Not2d);
    }
    if boxes.is_empty() {
        return Ok(1.0);
    }
    let covered = boxes.iter().filter(|b| g.contains(&g.cell_of(b.cx, b.cy, 0.0))).count();
    Ok(covered as f64 / boxes.len() as f64)
}

/// Block layout of the sparse backbone's coordinate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSchedule {
    pub kernel: usize,
    /// Strides of the 3D encoder blocks, in order.
    pub strides: Vec<i64>,
    /// Encoder strides whose block uses a coordinate-expandable convolution.
    pub cec_strides: Vec<i64>,
    /// Number of 2D CEC layers applied on the BEV projection.
    pub bev_cec_layers: usize,
}

impl Default for BackboneSchedule {
    fn default() -> Self {
        Self { kernel: 3, strides: vec![1, 2, 4, 8], cec_strides: vec![4, 8], bev_cec_layers: 2 }
    }
}

/// Diagnostics for one stage of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub stride: i64,
    pub dims: u8,
    pub coords: usize,
    pub connectivity: ConnectivityReport,
    /// Share of boxes whose center cell is active in the BEV projection.
    pub center_coverage: f64,
}

impl BackboneSchedule {
    /// Runs the coordinate schedule on a stride-1 3D grid.
    ///
    /// Encoder blocks downsample with the standard rule and, at the CEC
    /// strides, expand afterwards. Decoder blocks contract back onto the
    /// encoder coordinates of the two finest CEC-free strides above 1,
    /// then the result is projected to BEV and expanded by 2D CECs.
    /// `expand = false` yields the plain sparse-convolution baseline.
    pub fn run(&self, input: &SparseGrid, boxes: &[BBox], expand: bool) -> Result<Vec<StageReport>, GridError> {
        let mut reports = Vec::new();
        let mut encoder = Vec::new();
        let mut cur = input.clone();
        for (i, &s) in self.strides.iter().enumerate() {
            cur = conv_coords_standard(&cur, self.kernel, s)?;
            if expand && self.cec_strides.contains(&s) {
                cur = cec_expand(&cur, self.kernel)?;
            }
            reports.push(stage_report(&format!("sconv{}", i + 1), &cur, boxes)?);
            encoder.push(cur.clone());
        }
        // decoder: contract onto each finer encoder level except the input level
        for (i, reference) in encoder.iter().enumerate().rev().skip(1) {
            if reference.stride() == 1 {
                break;
            }
            cur = cec_contract(&cur, reference)?;
            reports.push(stage_report(&format!("tconv{}", i + 1), &cur, boxes)?);
        }
        let mut bev = project_bev(&cur);
        reports.push(stage_report("bev", &bev, boxes)?);
        if expand {
            for i in 0..self.bev_cec_layers {
                bev = cec_expand(&bev, self.kernel)?;
                reports.push(stage_report(&format!("bev_cec{}", i + 1), &bev, boxes)?);
            }
        }
        Ok(reports)
    }
}

fn stage_report(stage: &str, g: &SparseGrid, boxes: &[BBox]) -> Result<StageReport, GridError> {
    let bev = project_bev(g);
    Ok(StageReport {
        stage: stage.to_string(),
        stride: g.stride(),
        dims: g.dims(),
        coords: g.len(),
        connectivity: connectivity(g),
        center_coverage: center_coverage(&bev, boxes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, TimedPoint};
    use std::collections::HashSet;

    fn grid2(coords: &[[i64; 2]]) -> SparseGrid {
        SparseGrid::from_coords(2, 1, 0.4, coords.iter().map(|c| [c[0], c[1], 0])).unwrap()
    }

    fn coord_set(g: &SparseGrid) -> HashSet<Coord> {
        g.coords().iter().copied().collect()
    }

    #[test]
    fn voxelize_examples() {
        let pc = TimedPointCloud::from_points(vec![TimedPoint::new(0.1, 0.1, 0.1, 0.0)], Frame::Ego);
        let g = voxelize(&pc, 0.4, 3).unwrap();
        assert_eq!(g.coords(), &[[0, 0, 0]]);

        let pc = TimedPointCloud::from_points(
            vec![TimedPoint::new(0.1, 0.1, 0.1, 0.02), TimedPoint::new(0.3, 0.2, 0.1, 0.05)],
            Frame::Ego,
        );
        let g = voxelize(&pc, 0.4, 3).unwrap();
        assert_eq!(g.len(), 1);
        let f = g.feature(&[0, 0, 0]).unwrap();
        assert_eq!(f[0], 2.0);
        assert_eq!((f[4], f[5]), (0.02, 0.05));

        let pc = TimedPointCloud::from_points(
            vec![TimedPoint::new(0.1, 0.1, 0.1, 0.0), TimedPoint::new(0.5, 0.1, 0.1, 0.0)],
            Frame::Ego,
        );
        assert_eq!(voxelize(&pc, 0.4, 3).unwrap().coords(), &[[0, 0, 0], [1, 0, 0]]);
        assert!(voxelize(&TimedPointCloud::new(Frame::Ego), 0.4, 2).unwrap().is_empty());
        assert_eq!(voxelize(&pc, 0.0, 3).unwrap_err(), GridError::BadVoxelSize(0.0));
    }

    #[test]
    fn negative_coordinates_floor() {
        let pc = TimedPointCloud::from_points(vec![TimedPoint::new(-0.1, -0.5, 0.0, 0.0)], Frame::Ego);
        assert_eq!(voxelize(&pc, 0.4, 2).unwrap().coords(), &[[-1, -2, 0]]);
    }

    #[test]
    fn standard_conv_examples() {
        let g = grid2(&[[0, 0], [6, 0]]);
        let same = conv_coords_standard(&g, 3, 1).unwrap();
        assert_eq!(same.coords(), g.coords());
        let mut deep = g.clone();
        for _ in 0..10 {
            deep = conv_coords_standard(&deep, 3, 1).unwrap();
        }
        assert_eq!(connectivity(&deep).component_count, 2);

        // floor division: 0→0, 2→1, 3→1 (stride-2 units) = {0, 2} at stride-1 resolution
        let g = grid2(&[[0, 0], [2, 0], [3, 0]]);
        let down = conv_coords_standard(&g, 3, 2).unwrap();
        assert_eq!(down.coords(), &[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(down.stride(), 2);
    }

    #[test]
    fn standard_conv_rejects_bad_kernel() {
        let g = grid2(&[[0, 0]]);
        assert!(matches!(conv_coords_standard(&g, 2, 1), Err(GridError::BadKernel { .. })));
        assert!(matches!(cec_expand(&g, 1), Err(GridError::BadKernel { .. })));
        assert!(matches!(conv_coords_standard(&g, 3, 3).and_then(|g| conv_coords_standard(&g, 3, 4)), Err(GridError::StrideMismatch { .. })));
    }

    #[test]
    fn expand_examples() {
        let empty = grid2(&[]);
        assert!(cec_expand(&empty, 3).unwrap().is_empty());
        let one = grid2(&[[0, 0]]);
        let e = cec_expand(&one, 3).unwrap();
        assert_eq!(e.len(), 9);
        let mut g = grid2(&[[0, 0], [6, 0]]);
        for n in 1..=3 {
            g = cec_expand(&g, 3).unwrap();
            let expect = if n < 3 { 2 } else { 1 };
            assert_eq!(connectivity(&g).component_count, expect, "after {n} layers");
        }
    }

    #[test]
    fn expand_features_are_neighbour_means() {
        let g = SparseGrid::from_entries(2, 1, 0.4, 1, vec![([0, 0, 0], vec![2.0]), ([2, 0, 0], vec![4.0])]).unwrap();
        let e = cec_expand(&g, 3).unwrap();
        assert_eq!(e.feature(&[1, 0, 0]), Some(&[3.0][..]));
        assert_eq!(e.feature(&[-1, 1, 0]), Some(&[2.0][..]));
        assert_eq!(e.feature(&[0, 0, 0]), Some(&[2.0][..]));
    }

    #[test]
    fn expand_respects_stride() {
        let g = SparseGrid::from_coords(3, 4, 0.4, [[0, 0, 0]]).unwrap();
        let e = cec_expand(&g, 3).unwrap();
        assert_eq!(e.len(), 27);
        assert!(e.contains(&[-4, 4, 4]));
        assert!(e.coords().iter().all(|c| c.iter().all(|v| v % 4 == 0)));
    }

    #[test]
    fn contract_examples() {
        let g = SparseGrid::from_entries(2, 1, 0.4, 1, vec![([0, 0, 0], vec![1.0]), ([3, 0, 0], vec![5.0])]).unwrap();
        assert_eq!(cec_contract(&g, &g).unwrap(), g);
        let e = cec_expand(&g, 3).unwrap();
        assert_eq!(coord_set(&cec_contract(&e, &g).unwrap()), coord_set(&g));
        let reference = grid2(&[[0, 0], [10, 10]]);
        let c = cec_contract(&g, &reference).unwrap();
        assert_eq!(c.feature(&[10, 10, 0]), Some(&[0.0][..]));
        assert_eq!(c.feature(&[0, 0, 0]), Some(&[1.0][..]));
    }

    #[test]
    fn contract_from_coarser_stride_reads_parent() {
        let coarse = SparseGrid::from_entries(2, 2, 0.4, 1, vec![([2, 0, 0], vec![7.0])]).unwrap();
        let fine = grid2(&[[2, 0], [3, 1], [4, 0]]);
        let c = cec_contract(&coarse, &fine).unwrap();
        assert_eq!(c.feature(&[3, 1, 0]), Some(&[7.0][..]));
        assert_eq!(c.feature(&[4, 0, 0]), Some(&[0.0][..]));
        assert!(cec_contract(&fine, &coarse).is_err());
    }

    #[test]
    fn connectivity_examples() {
        assert_eq!(connectivity(&grid2(&[])).component_count, 0);
        assert_eq!(connectivity(&grid2(&[[0, 0]])).component_count, 1);
        assert_eq!(connectivity(&grid2(&[[0, 0], [1, 1]])).component_count, 1);
        let r = connectivity(&grid2(&[[0, 0], [3, 0]]));
        assert_eq!((r.component_count, r.largest_gap), (2, 3));
        assert_eq!(r.component_sizes.iter().sum::<usize>(), 2);
    }

    #[test]
    fn largest_gap_takes_the_most_isolated_component() {
        // A-B gap 2, C is 9 away from B
        let r = connectivity(&grid2(&[[0, 0], [2, 0], [11, 0]]));
        assert_eq!(r.component_count, 3);
        assert_eq!(r.largest_gap, 9);
    }

    #[test]
    fn coverage_examples() {
        let g = grid2(&[[0, 0]]);
        let b = BBox::new([0.2, 0.2, 0.0], [4.0, 2.0, 1.5], 0.0);
        assert_eq!(center_coverage(&g, &[b]).unwrap(), 1.0);
        assert_eq!(center_coverage(&g, &[]).unwrap(), 1.0);
        let far = BBox::new([20.2, 0.2, 0.0], [4.0, 2.0, 1.5], 0.0);
        assert_eq!(center_coverage(&g, &[b, far]).unwrap(), 0.5);
        let g3 = SparseGrid::from_coords(3, 1, 0.4, [[0, 0, 0]]).unwrap();
        assert_eq!(center_coverage(&g3, &[b]), Err(GridError::Not2d));
    }

    #[test]
    fn hollow_ring_covered_after_two_layers() {
        let ring: Vec<[i64; 2]> = (-2..=2)
            .flat_map(|x| (-2..=2).map(move |y| [x, y]))
            .filter(|c: &[i64; 2]| c[0].abs().max(c[1].abs()) == 2)
            .collect();
        let mut g = grid2(&ring);
        let b = BBox::new([0.2, 0.2, 0.0], [2.0, 2.0, 1.5], 0.0);
        assert_eq!(center_coverage(&g, &[b]).unwrap(), 0.0);
        g = cec_expand(&g, 3).unwrap();
        g = cec_expand(&g, 3).unwrap();
        assert_eq!(center_coverage(&g, &[b]).unwrap(), 1.0);
    }

    #[test]
    fn grid_validation() {
        assert_eq!(
            SparseGrid::from_coords(2, 1, 0.4, [[0, 0, 0], [0, 0, 0]]).unwrap_err(),
            GridError::DuplicateCoord([0, 0, 0])
        );
        assert!(matches!(SparseGrid::from_coords(2, 2, 0.4, [[1, 0, 0]]), Err(GridError::Misaligned { .. })));
        assert!(matches!(SparseGrid::from_coords(4, 1, 0.4, [[1, 0, 0]]), Err(GridError::BadDims(4))));
    }

    #[test]
    fn dump_format() {
        let g = SparseGrid::from_entries(2, 2, 0.4, 2, vec![([2, -4, 0], vec![1.0, 0.5])]).unwrap();
        assert_eq!(g.dump_text(), "2 2 -4 | 1 0.5\n");
    }

    #[test]
    fn schedule_runs_and_expansion_merges() {
        // hollow ring two stride-2 cells out from the center
        let ring: Vec<Coord> = (-4..=4)
            .flat_map(|x| (-4..=4).map(move |y| [x, y, 0]))
            .filter(|c: &Coord| c[0].abs().max(c[1].abs()) == 4)
            .chain([[40, 0, 0]])
            .collect();
        let g = SparseGrid::from_coords(3, 1, 0.4, ring).unwrap();
        let b = BBox::new([0.2, 0.2, 0.0], [3.2, 3.2, 1.5], 0.0);
        let sched = BackboneSchedule::default();
        let plain = sched.run(&g, &[b], false).unwrap();
        let cec = sched.run(&g, &[b], true).unwrap();
        let last_plain = plain.last().unwrap();
        let last_cec = cec.last().unwrap();
        assert!(last_cec.connectivity.component_count <= last_plain.connectivity.component_count);
        assert_eq!(last_cec.center_coverage, 1.0);
        assert!(cec.iter().any(|r| r.stage == "tconv3"));
    }
}
