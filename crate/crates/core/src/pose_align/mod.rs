//! Pose alignment from shared detections.
//!
//! Two agents that see the same vehicles can recover their relative pose
//! from the boxes alone: neighbourhood descriptors are matched with the
//! Hungarian algorithm, poor matches are rejected, and a rigid fit over the
//! survivors gives the corrected transform. With more than two agents the
//! pairwise estimates are refined jointly as a pose graph.

mod descriptor;
mod graph;
mod hungarian;
mod se2;

pub use descriptor::{
    build_descriptors, nearest_neighbors, BoxDescriptor, NeighborFeature, DEFAULT_NEIGHBORS, DESCRIPTOR_WIDTH,
    NEIGHBOR_FEATURE_WIDTH,
};
pub use graph::{graph_cost, optimize_graph, pose_graph_optimize, GraphReport, PoseEdge};
pub use hungarian::linear_sum_assignment;
pub use se2::{estimate_se2, pair_residuals};

use crate::geometry::{angle_diff, BBox, Pose};
use std::f64::consts::PI;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("need at least 2 boxes to build neighbourhoods, got {0}")]
    TooFewBoxes(usize),
    #[error("neighbour count must be positive")]
    BadNeighborCount,
    #[error("no correspondences to fit")]
    NoPairs,
    #[error("pose graph has no nodes")]
    EmptyGraph,
    #[error("invalid edge {0} -> {1}")]
    BadEdge(usize, usize),
    #[error("pose graph is disconnected")]
    Disconnected,
    #[error("normal equations stayed singular after damping")]
    SingularGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub i: usize,
    pub j: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    /// Assigned pairs whose cost exceeded the rejection threshold.
    pub rejected: Vec<MatchPair>,
}

/// Optimal one-to-one matching of descriptors by Euclidean distance.
pub fn match_boxes(da: &[BoxDescriptor], db: &[BoxDescriptor], reject_threshold: f64) -> MatchResult {
    let cost: Vec<Vec<f64>> = da.iter().map(|a| db.iter().map(|b| a.distance(b)).collect()).collect();
    match_cost_matrix(&cost, reject_threshold)
}

pub fn match_cost_matrix(cost: &[Vec<f64>], reject_threshold: f64) -> MatchResult {
    let mut out = MatchResult::default();
    for (i, j) in linear_sum_assignment(cost) {
        let pair = MatchPair { i, j, cost: cost[i][j] };
        if pair.cost > reject_threshold {
            out.rejected.push(pair);
        } else {
            out.pairs.push(pair);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Neighbours per descriptor.
    pub neighbors: usize,
    /// Meters that map to 1.0 in the descriptor distance channels.
    pub distance_norm: f64,
    /// Maximum descriptor distance of an accepted match (normalized space).
    pub reject_threshold: f64,
    /// Center residual (m) under which a match agrees with a rigid hypothesis.
    pub inlier_radius: f64,
    /// Fewer surviving matches than this keeps the prior.
    pub min_pairs: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { neighbors: DEFAULT_NEIGHBORS, distance_norm: 50.0, reject_threshold: 0.3, inlier_radius: 1.0, min_pairs: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOutcome {
    /// Corrected pose of the cooperative frame in the ego frame.
    pub pose: Pose,
    /// Set when too few matches survived and `pose` is the prior.
    pub low_confidence: bool,
    pub matches: MatchResult,
    /// `(ego index, coop index)` of the matches used in the final fit.
    pub inliers: Vec<(usize, usize)>,
}

impl AlignOutcome {
    fn fallback(prior: &Pose, matches: MatchResult) -> Self {
        Self { pose: *prior, low_confidence: true, matches, inliers: Vec::new() }
    }
}

/// Matches the descriptors of two box sets.
///
/// The prior pose is deliberately absent: the result depends only on the
/// boxes, whatever the size of the localization error.
pub fn match_box_sets(ego: &[BBox], coop: &[BBox], cfg: &AlignConfig) -> Result<MatchResult, AlignError> {
    let scale = |d: Vec<BoxDescriptor>| d.into_iter().map(|x| x.scaled(cfg.distance_norm)).collect::<Vec<_>>();
    let da = scale(build_descriptors(ego, cfg.neighbors)?);
    let db = scale(build_descriptors(coop, cfg.neighbors)?);
    Ok(match_boxes(&da, &db, cfg.reject_threshold))
}

/// Corrects the prior cooperative-to-ego pose from shared detections.
///
/// Accepted descriptor matches go through a deterministic consensus step:
/// every pair of matches proposes a rigid motion, the proposal agreeing with
/// the most matches (within `inlier_radius`) wins, and the final pose is the
/// rigid fit over its inliers. Falls back to `prior` when fewer than
/// `min_pairs` matches agree.
pub fn align_agent(ego: &[BBox], coop: &[BBox], prior: &Pose, cfg: &AlignConfig) -> AlignOutcome {
    let matches = match match_box_sets(ego, coop, cfg) {
        Ok(m) => m,
        Err(_) => return AlignOutcome::fallback(prior, MatchResult::default()),
    };
    let pairs: Vec<(BBox, BBox)> = matches.pairs.iter().map(|m| (ego[m.i], coop[m.j])).collect();
    if pairs.len() < cfg.min_pairs.max(2) {
        return AlignOutcome::fallback(prior, matches);
    }
    let inliers = consensus(&pairs, cfg.inlier_radius);
    // two pairs always fit some rigid motion; with more on offer, a
    // hypothesis nothing else agrees with is not evidence
    let support = if pairs.len() >= 3 { 3 } else { 2 };
    if inliers.len() < cfg.min_pairs.max(support) {
        return AlignOutcome::fallback(prior, matches);
    }
    let chosen: Vec<(BBox, BBox)> = inliers.iter().map(|&k| pairs[k]).collect();
    let Ok(pose) = estimate_se2(&chosen) else {
        return AlignOutcome::fallback(prior, matches);
    };
    let inliers = inliers.iter().map(|&k| (matches.pairs[k].i, matches.pairs[k].j)).collect();
    AlignOutcome { pose: Pose { z: prior.z, ..pose }, low_confidence: false, matches, inliers }
}

/// Heading disagreement (rad) tolerated for a consensus inlier.
const INLIER_HEADING_TOL: f64 = 0.175;

// headings are compared modulo π since box orientation is symmetric
fn heading_residual((a, b): &(BBox, BBox), pose: &Pose) -> f64 {
    let d = angle_diff(a.yaw, b.yaw + pose.yaw).abs();
    d.min(PI - d)
}

// indices of the largest set of pairs consistent with one rigid motion
fn consensus(pairs: &[(BBox, BBox)], radius: f64) -> Vec<usize> {
    let inliers_of = |pose: &Pose| -> Vec<usize> {
        pair_residuals(pairs, pose)
            .iter()
            .enumerate()
            .filter(|&(k, r)| *r <= radius && heading_residual(&pairs[k], pose) <= INLIER_HEADING_TOL)
            .map(|(k, _)| k)
            .collect()
    };
    let mut best: Vec<usize> = Vec::new();
    for a in 0..pairs.len() {
        for b in (a + 1)..pairs.len() {
            let Ok(pose) = estimate_se2(&[pairs[a], pairs[b]]) else { continue };
            let set = inliers_of(&pose);
            if set.len() > best.len() {
                best = set;
            }
        }
    }
    // one refit on the winning set, then keep whatever still agrees
    if best.len() >= 2 {
        let chosen: Vec<_> = best.iter().map(|&k| pairs[k]).collect();
        if let Ok(pose) = estimate_se2(&chosen) {
            let refined = inliers_of(&pose);
            if refined.len() >= best.len() {
                best = refined;
            }
        }
    }
    best
}

/// Result of aligning several cooperative agents to the ego (node 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetAlignment {
    /// Pose of each agent frame in the ego frame; entry 0 is the identity.
    pub poses: Vec<Pose>,
    pub pairwise: Vec<(usize, usize, AlignOutcome)>,
    pub graph: Option<GraphReport>,
}

/// Weight of the edge that ties every agent to its prior.
const PRIOR_EDGE_WEIGHT: f64 = 1e-3;

/// Aligns every agent's boxes against every other's, then refines all poses
/// jointly so loops of pairwise estimates agree.
///
/// `boxes[k]` are in agent `k`'s frame and `priors[k]` is that frame's prior
/// pose in the ego frame (`priors[0]` is ignored and taken as identity).
pub fn align_fleet(boxes: &[Vec<BBox>], priors: &[Pose], cfg: &AlignConfig) -> Result<FleetAlignment, AlignError> {
    let n = boxes.len();
    if n == 0 || priors.len() != n {
        return Err(AlignError::EmptyGraph);
    }
    let mut init: Vec<Pose> = priors.to_vec();
    init[0] = Pose::identity();
    let mut pairwise = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let prior_ij = init[i].inverse().compose(&init[j]);
            let out = align_agent(&boxes[i], &boxes[j], &prior_ij, cfg);
            if !out.low_confidence {
                edges.push(PoseEdge::new(i, j, out.pose, out.inliers.len() as f64));
                if i == 0 {
                    init[j] = out.pose;
                }
            }
            pairwise.push((i, j, out));
        }
    }
    if n == 1 {
        return Ok(FleetAlignment { poses: init, pairwise, graph: None });
    }
    for (k, p) in priors.iter().enumerate().skip(1) {
        edges.push(PoseEdge::new(0, k, *p, PRIOR_EDGE_WEIGHT));
    }
    let report = optimize_graph(&init, &edges)?;
    Ok(FleetAlignment { poses: report.poses.clone(), pairwise, graph: Some(report) })
}
