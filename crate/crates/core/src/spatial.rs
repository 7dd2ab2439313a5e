//! Spatial alignment of cooperative queries onto the ego query grid.
//!
//! Cooperative queries are moved into the ego frame, snapped to ego grid
//! nodes and fused with the ego queries by k-nearest-neighbour aggregation:
//! every output node gathers its neighbours, conditions each neighbour
//! feature on the relative offset, and pools with `max + mean`.

use crate::geometry::Pose;
use crate::temporal::Query;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const DEFAULT_GRID_RES: f64 = 0.8;
pub const DEFAULT_FUSION_K: usize = 8;
/// Number of trailing feature slots that carry the flattened rotation.
pub const ROTATION_SLOTS: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("feature width {0} cannot hold the {ROTATION_SLOTS}-slot rotation suffix")]
    FeatureTooNarrow(usize),
    #[error("grid resolution must be positive, got {0}")]
    BadGridRes(f64),
}

/// Conditions a cooperative query feature on the sender-to-ego rotation.
pub trait RotationAdapter {
    fn adapt(&self, feature: &[f32], r: &[[f64; 3]; 3]) -> Result<Vec<f32>, SpatialError>;
}

/// Keeps the feature and overwrites its last nine slots with `R`, row-major.
#[derive(Debug, Clone, Copy, Default)]
pub struct RotationSuffix;

impl RotationAdapter for RotationSuffix {
    fn adapt(&self, feature: &[f32], r: &[[f64; 3]; 3]) -> Result<Vec<f32>, SpatialError> {
        let w = feature.len();
        if w < ROTATION_SLOTS {
            return Err(SpatialError::FeatureTooNarrow(w));
        }
        let mut out = feature.to_vec();
        for (k, v) in r.iter().flatten().enumerate() {
            out[w - ROTATION_SLOTS + k] = *v as f32;
        }
        Ok(out)
    }
}

/// Max-abs entry of `RᵀR − I`.
pub fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn adapt_rotation(queries: &[Query], r: &[[f64; 3]; 3]) -> Result<Vec<Query>, SpatialError> {
    adapt_rotation_with(queries, r, &RotationSuffix)
}

pub fn adapt_rotation_with(
    queries: &[Query],
    r: &[[f64; 3]; 3],
    adapter: &dyn RotationAdapter,
) -> Result<Vec<Query>, SpatialError> {
    let err = orthonormality_error(r);
    if !(err < 1e-6) {
        return Err(SpatialError::NotOrthonormal(err));
    }
    queries
        .iter()
        .map(|q| Ok(Query { feature: adapter.adapt(&q.feature, r)?, ..q.clone() }))
        .collect()
}

/// Round half up onto a grid of spacing `res`.
pub fn snap_coord(v: f64, res: f64) -> f64 {
    (v / res + 0.5).floor() * res
}

/// Transforms queries by `t_c_e` (coop frame to ego frame) and snaps each
/// position to the nearest ego grid node.
pub fn snap_to_grid(queries: &[Query], t_c_e: &Pose, grid_res: f64) -> Result<Vec<Query>, SpatialError> {
    if !(grid_res > 0.0) {
        return Err(SpatialError::BadGridRes(grid_res));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let (x, y) = t_c_e.apply_xy(q.x, q.y);
            Query { x: snap_coord(x, grid_res), y: snap_coord(y, grid_res), ..q.clone() }
        })
        .collect())
}

/// Per-neighbour feature map conditioned on the offset from the node.
pub trait NeighborTransform: Sync {
    fn transform(&self, feature: &[f32], dx: f64, dy: f64) -> Vec<f32>;
}

/// `F / (1 + |Δ| / grid_res)`.
#[derive(Debug, Clone, Copy)]
pub struct InverseDistance {
    pub grid_res: f64,
}

impl NeighborTransform for InverseDistance {
    fn transform(&self, feature: &[f32], dx: f64, dy: f64) -> Vec<f32> {
        let s = (1.0 / (1.0 + dx.hypot(dy) / self.grid_res)) as f32;
        feature.iter().map(|f| f * s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k: usize,
    pub grid_res: f64,
    /// Neighbours farther than this from the node are ignored.
    pub gate_radius: f64,
    /// Divide `max + mean` by two.
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { k: DEFAULT_FUSION_K, grid_res: DEFAULT_GRID_RES, gate_radius: 4.0 * DEFAULT_GRID_RES, normalize: true }
    }
}

impl FusionConfig {
    /// Each node only sees its own representative query.
    pub fn self_only() -> Self {
        Self { k: 1, ..Self::default() }
    }
}

pub fn knn_fuse(ego: &[Query], coop: &[Query], k: usize) -> Vec<Query> {
    let cfg = FusionConfig { k, ..FusionConfig::default() };
    knn_fuse_with(ego, coop, &cfg, &InverseDistance { grid_res: cfg.grid_res })
}

/// Fuses ego and (already snapped) cooperative queries.
///
/// Output nodes are the distinct positions of `ego ∪ coop`, represented by
/// their highest-scoring query. An empty `coop` returns `ego` unchanged.
pub fn knn_fuse_with(ego: &[Query], coop: &[Query], cfg: &FusionConfig, tf: &dyn NeighborTransform) -> Vec<Query> {
    if coop.is_empty() {
        return ego.to_vec();
    }
    let all: Vec<&Query> = ego.iter().chain(coop).collect();
    let nodes = dedup_nodes(&all);
    let buckets = Buckets::new(&all, cfg.gate_radius);
    nodes.iter().map(|&rep| fuse_node(all[rep], &all, &buckets, cfg, tf)).collect()
}

// Uniform hash grid with cells one gate radius wide; every neighbour inside
// the gate lies in the 3x3 block around the node's cell.
struct Buckets {
    cell: f64,
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl Buckets {
    fn new(all: &[&Query], gate: f64) -> Self {
        let cell = if gate.is_finite() && gate > 0.0 { gate } else { f64::INFINITY };
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (j, q) in all.iter().enumerate() {
            map.entry(Self::key(cell, q.x, q.y)).or_default().push(j);
        }
        Self { cell, map }
    }

    fn key(cell: f64, x: f64, y: f64) -> (i64, i64) {
        if cell.is_finite() {
            ((x / cell).floor() as i64, (y / cell).floor() as i64)
        } else {
            (0, 0)
        }
    }

    fn around(&self, x: f64, y: f64) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = Self::key(self.cell, x, y);
        let span = if self.cell.is_finite() { 1 } else { 0 };
        (-span..=span)
            .flat_map(move |di| (-span..=span).map(move |dj| (i + di, j + dj)))
            .filter_map(|k| self.map.get(&k))
            .flatten()
            .copied()
    }
}

fn dedup_nodes(all: &[&Query]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&a, &b| {
        all[a].x.total_cmp(&all[b].x).then(all[a].y.total_cmp(&all[b].y)).then(all[b].score.total_cmp(&all[a].score)).then(a.cmp(&b))
    });
    let mut reps: Vec<usize> = Vec::new();
    for i in order {
        match reps.last() {
            Some(&r) if (all[r].x - all[i].x).abs() < 1e-9 && (all[r].y - all[i].y).abs() < 1e-9 => {}
            _ => reps.push(i),
        }
    }
    reps.sort_unstable();
    reps
}

fn fuse_node(node: &Query, all: &[&Query], buckets: &Buckets, cfg: &FusionConfig, tf: &dyn NeighborTransform) -> Query {
    let mut near: Vec<(f64, usize)> = buckets
        .around(node.x, node.y)
        .map(|j| ((all[j].x - node.x).hypot(all[j].y - node.y), j))
        .filter(|(d, _)| *d <= cfg.gate_radius)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(cfg.k.max(1));

    let width = node.feature.len();
    let mut max = vec![f32::NEG_INFINITY; width];
    let mut sum = vec![0.0f64; width];
    let (mut score, mut wsum, mut tsum, mut tplain) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(_, j) in &near {
        let q = all[j];
        let f = tf.transform(&q.feature, q.x - node.x, q.y - node.y);
        for (c, v) in f.iter().enumerate().take(width) {
            max[c] = max[c].max(*v);
            sum[c] += *v as f64;
        }
        score = score.max(q.score);
        wsum += q.score;
        tsum += q.score * q.t;
        tplain += q.t;
    }
    let n = near.len() as f64;
    let div = if cfg.normalize { 2.0 } else { 1.0 };
    let feature = max.iter().zip(&sum).map(|(m, s)| ((*m as f64 + s / n) / div) as f32).collect();
    let t = if wsum > 0.0 { tsum / wsum } else { tplain / n };
    Query { feature, x: node.x, y: node.y, score, t, track_id: node.track_id }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(x: f64, y: f64, score: f64, f: Vec<f32>) -> Query {
        Query::new(x, y, score, 0.0, f)
    }

    #[test]
    fn identity_rotation_suffix() {
        let r = Pose::identity().rotation_matrix();
        let out = adapt_rotation(&[q(0.0, 0.0, 1.0, vec![7.0; 12])], &r).unwrap();
        assert_eq!(out[0].feature.len(), 12);
        assert_eq!(&out[0].feature[..3], &[7.0; 3]);
        assert_eq!(&out[0].feature[3..], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn yaw_rotation_suffix_is_row_major() {
        let r = Pose::new(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2).rotation_matrix();
        let out = adapt_rotation(&[q(0.0, 0.0, 1.0, vec![0.0; 9])], &r).unwrap();
        let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in out[0].feature.iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rotation_errors() {
        let bad = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(adapt_rotation(&[], &bad), Err(SpatialError::NotOrthonormal(_))));
        let r = Pose::identity().rotation_matrix();
        assert_eq!(adapt_rotation(&[q(0.0, 0.0, 1.0, vec![0.0; 4])], &r), Err(SpatialError::FeatureTooNarrow(4)));
    }

    #[test]
    fn snapping_examples() {
        let id = Pose::identity();
        let on = snap_to_grid(&[q(1.6, -0.8, 1.0, vec![])], &id, 0.8).unwrap();
        assert!((on[0].x - 1.6).abs() < 1e-12 && (on[0].y + 0.8).abs() < 1e-12);
        let a = snap_to_grid(&[q(0.3, 0.0, 1.0, vec![])], &id, 0.8).unwrap();
        assert_eq!((a[0].x, a[0].y), (0.0, 0.0));
        let b = snap_to_grid(&[q(0.41, 0.79, 1.0, vec![])], &id, 0.8).unwrap();
        assert!((b[0].x - 0.8).abs() < 1e-12 && (b[0].y - 0.8).abs() < 1e-12);
        // half-way rounds up
        assert!((snap_coord(0.4, 0.8) - 0.8).abs() < 1e-12);
        assert!((snap_coord(-0.4, 0.8)).abs() < 1e-12);
        assert!(snap_to_grid(&[], &id, 0.0).is_err());
    }

    #[test]
    fn snapping_applies_the_transform_first() {
        let t = Pose::new(10.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let out = snap_to_grid(&[q(1.0, 0.0, 1.0, vec![])], &t, 0.8).unwrap();
        assert!((out[0].x - 10.4).abs() < 1e-9 && (out[0].y - 0.8).abs() < 1e-9);
    }

    #[test]
    fn fusion_examples() {
        let ego = vec![q(0.0, 0.0, 0.9, vec![1.0, -2.0, 3.0])];
        assert_eq!(knn_fuse(&ego, &[], 8), ego);

        let f1 = vec![1.0f32, 4.0, -1.0];
        let f2 = vec![3.0f32, 0.0, -3.0];
        let out = knn_fuse(&[q(0.0, 0.0, 0.6, f1.clone())], &[q(0.0, 0.0, 0.8, f2.clone())], 8);
        assert_eq!(out.len(), 1);
        for c in 0..3 {
            let expected = (f1[c].max(f2[c]) + (f1[c] + f2[c]) / 2.0) / 2.0;
            assert!((out[0].feature[c] - expected).abs() < 1e-6);
        }
        assert_eq!(out[0].score, 0.8);

        let far = q(100.0, 0.0, 0.7, vec![5.0, 6.0, 7.0]);
        let out = knn_fuse(&ego, &[far.clone()], 8);
        assert_eq!(out.len(), 2);
        let iso = out.iter().find(|o| o.x == 100.0).unwrap();
        assert_eq!(iso.feature, far.feature);
    }

    #[test]
    fn neighbours_are_distance_scaled() {
        let ego = vec![q(0.0, 0.0, 0.5, vec![0.0])];
        let coop = vec![q(0.8, 0.0, 0.5, vec![4.0])];
        let out = knn_fuse(&ego, &coop, 8);
        let at_origin = out.iter().find(|o| o.x == 0.0).unwrap();
        // neighbour at one grid step is halved: max 2, mean 1
        assert!((at_origin.feature[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn self_only_mode_keeps_representatives() {
        let cfg = FusionConfig::self_only();
        let tf = InverseDistance { grid_res: cfg.grid_res };
        let out = knn_fuse_with(&[q(0.0, 0.0, 0.5, vec![1.0])], &[q(0.8, 0.0, 0.5, vec![4.0])], &cfg, &tf);
        assert_eq!(out[0].feature, vec![1.0]);
        assert_eq!(out[1].feature, vec![4.0]);
    }

    #[test]
    fn score_weighted_time() {
        let mut a = q(0.0, 0.0, 0.25, vec![0.0]);
        a.t = 1.0;
        let mut b = q(0.0, 0.0, 0.75, vec![0.0]);
        b.t = 2.0;
        let out = knn_fuse(&[a], &[b], 8);
        assert!((out[0].t - 1.75).abs() < 1e-12);
    }

    fn arb_queries(max: usize) -> impl Strategy<Value = Vec<Query>> {
        proptest::collection::vec(
            ((-5i32..5), (-5i32..5), 0.0..1.0f64, proptest::collection::vec(-10.0f32..10.0, 3)),
            0..max,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, s, f)| q(x as f64 * 0.8, y as f64 * 0.8, s, f)).collect())
    }

    proptest! {
        #[test]
        fn fusion_bounds(ego in arb_queries(8), coop in arb_queries(8)) {
            prop_assume!(!ego.is_empty() || !coop.is_empty());
            let out = knn_fuse(&ego, &coop, 8);
            prop_assert!(out.len() <= ego.len() + coop.len());
            let bound = ego.iter().chain(&coop).flat_map(|q| q.feature.iter()).fold(0.0f32, |m, v| m.max(v.abs()));
            for o in &out {
                for v in &o.feature {
                    prop_assert!(v.abs() <= 2.0 * bound + 1e-4);
                }
            }
        }

        #[test]
        fn fusion_ignores_coop_order(ego in arb_queries(6), coop in arb_queries(6)) {
            let mut rev = coop.clone();
            rev.reverse();
            // k covers every neighbour so tie truncation cannot depend on order
            let mut a = knn_fuse(&ego, &coop, 64);
            let mut b = knn_fuse(&ego, &rev, 64);
            let key = |q: &Query| (q.x.to_bits(), q.y.to_bits());
            a.sort_by_key(key);
            b.sort_by_key(key);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.score, y.score);
                for (u, v) in x.feature.iter().zip(&y.feature) {
                    prop_assert!((u - v).abs() < 1e-4);
                }
            }
        }

        #[test]
        fn snapped_positions_lie_on_nodes(x in -100.0..100.0f64, y in -100.0..100.0f64, yaw in -3.0..3.0f64) {
            let out = snap_to_grid(&[q(x, y, 0.5, vec![])], &Pose::new(1.0, 2.0, 0.0, yaw), 0.8).unwrap();
            for v in [out[0].x, out[0].y] {
                let k = v / 0.8;
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }
}
