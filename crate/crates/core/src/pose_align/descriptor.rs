//! Pose-agnostic neighbourhood descriptors for detected boxes.
//!
//! Every feature is measured relative to the box itself (distances, and
//! angles taken against the box heading), so any rigid motion of the whole
//! box set leaves the descriptors unchanged.

use super::AlignError;
use crate::geometry::BBox;
use serde::{Deserialize, Serialize};

pub const DEFAULT_NEIGHBORS: usize = 8;
pub const NEIGHBOR_FEATURE_WIDTH: usize = 8;
pub const DESCRIPTOR_WIDTH: usize = 2 * NEIGHBOR_FEATURE_WIDTH;

/// Geometry of one neighbour as seen from a box with heading α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborFeature {
    /// Center distance.
    pub eps_d: f64,
    /// `[sin(θ − α), cos(θ − α)]`, θ the direction towards the neighbour.
    pub eps_a: [f64; 2],
    /// `[sin(β − α), cos(β − α)]`, β the neighbour heading.
    pub nu_a: [f64; 2],
    /// Neighbour `[l, w, h]`.
    pub nu_dim: [f64; 3],
}

impl NeighborFeature {
    pub fn between(anchor: &BBox, neighbor: &BBox) -> Self {
        let (dx, dy) = (neighbor.cx - anchor.cx, neighbor.cy - anchor.cy);
        let edge = dy.atan2(dx);
        let (se, ce) = (edge - anchor.yaw).sin_cos();
        let (so, co) = (neighbor.yaw - anchor.yaw).sin_cos();
        Self {
            eps_d: dx.hypot(dy),
            eps_a: [se, ce],
            nu_a: [so, co],
            nu_dim: [neighbor.l, neighbor.w, neighbor.h],
        }
    }

    pub fn to_array(&self) -> [f64; NEIGHBOR_FEATURE_WIDTH] {
        [
            self.eps_d,
            self.eps_a[0],
            self.eps_a[1],
            self.nu_a[0],
            self.nu_a[1],
            self.nu_dim[0],
            self.nu_dim[1],
            self.nu_dim[2],
        ]
    }
}

/// `[mean; max]` of the neighbour features of one box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDescriptor {
    pub vector: [f64; DESCRIPTOR_WIDTH],
}

impl BoxDescriptor {
    /// Copy with the two distance channels divided by `distance_norm`, so
    /// meters and unit-vector channels weigh comparably in a matching cost.
    pub fn scaled(&self, distance_norm: f64) -> BoxDescriptor {
        let mut vector = self.vector;
        vector[0] /= distance_norm;
        vector[NEIGHBOR_FEATURE_WIDTH] /= distance_norm;
        BoxDescriptor { vector }
    }

    pub fn distance(&self, other: &BoxDescriptor) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean_distance(&self) -> f64 {
        self.vector[0]
    }
}

/// The `k` nearest neighbours of box `i`, nearest first, ties by index.
pub fn nearest_neighbors(boxes: &[BBox], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = boxes
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, b)| ((b.cx - boxes[i].cx).hypot(b.cy - boxes[i].cy), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Builds one descriptor per box from its `k` nearest neighbours.
///
/// With fewer than `k` other boxes the statistics run over the neighbours
/// that exist.
pub fn build_descriptors(boxes: &[BBox], k: usize) -> Result<Vec<BoxDescriptor>, AlignError> {
    if boxes.len() < 2 {
        return Err(AlignError::TooFewBoxes(boxes.len()));
    }
    if k == 0 {
        return Err(AlignError::BadNeighborCount);
    }
    Ok((0..boxes.len())
        .map(|i| {
            let nbrs = nearest_neighbors(boxes, i, k);
            let mut mean = [0.0; NEIGHBOR_FEATURE_WIDTH];
            let mut max = [f64::NEG_INFINITY; NEIGHBOR_FEATURE_WIDTH];
            for &j in &nbrs {
                let f = NeighborFeature::between(&boxes[i], &boxes[j]).to_array();
                for c in 0..NEIGHBOR_FEATURE_WIDTH {
                    mean[c] += f[c];
                    max[c] = max[c].max(f[c]);
                }
            }
            let n = nbrs.len() as f64;
            let mut vector = [0.0; DESCRIPTOR_WIDTH];
            for c in 0..NEIGHBOR_FEATURE_WIDTH {
                vector[c] = mean[c] / n;
                vector[NEIGHBOR_FEATURE_WIDTH + c] = max[c];
            }
            BoxDescriptor { vector }
        })
        .collect())
}
