//! Weight-free stand-ins for the learned detection heads.
//!
//! [`detect_boxes`] clusters above-ground returns in BEV and fits an
//! oriented rectangle to each cluster by a search over headings that
//! maximizes how close points lie to the rectangle edges, then completes
//! partially seen vehicles to a prior size away from the sensor.
//! [`select_queries`] turns detections and BEV point density into the top-K
//! object queries a learned RoI head would emit. [`oracle_detections`]
//! perturbs ground truth for experiments that isolate alignment from
//! detection quality.

use super::lidar::LabeledScan;
use super::scenario::Scene;
use crate::geometry::{bev_iou, wrap_angle, BBox, TimedPointCloud};
use crate::temporal::Query;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// BEV clustering cell (m).
    pub cell: f64,
    /// Points lower than this above the ground are ignored (m).
    pub ground_clearance: f64,
    /// Cells up to this many apart (Chebyshev) join one cluster.
    pub link_cells: i64,
    pub min_points: usize,
    /// Minimum completed size `[l, w, h]` of a vehicle.
    pub prior_dims: [f64; 3],
    pub yaw_step_deg: f64,
    /// Clusters longer than this are not vehicles (m).
    pub max_extent: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            cell: 0.3,
            ground_clearance: 0.2,
            link_cells: 2,
            min_points: 8,
            prior_dims: [4.5, 2.0, 1.6],
            yaw_step_deg: 1.0,
            max_extent: 12.0,
        }
    }
}

fn cell_of(x: f64, y: f64, size: f64) -> (i64, i64) {
    ((x / size).floor() as i64, (y / size).floor() as i64)
}

/// Groups point indices by BEV connectivity, in a deterministic order.
pub fn cluster_points(pc: &TimedPointCloud, indices: &[usize], cell: f64, link: i64) -> Vec<Vec<usize>> {
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for &i in indices {
        let p = &pc.points[i];
        cells.entry(cell_of(p.x, p.y, cell)).or_default().push(i);
    }
    let keys: Vec<(i64, i64)> = cells.keys().copied().collect();
    let id: HashMap<(i64, i64), usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut seen = vec![false; keys.len()];
    let mut clusters = Vec::new();
    for start in 0..keys.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut members = Vec::new();
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&keys[c]]);
            let (cx, cy) = keys[c];
            for dx in -link..=link {
                for dy in -link..=link {
                    if let Some(&n) = id.get(&(cx + dx, cy + dy)) {
                        if !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// Heading in `[0, π/2)` whose rectangle hugs the points best.
pub fn best_heading(xy: &[[f64; 2]], step_deg: f64) -> f64 {
    let steps = (90.0 / step_deg).round().max(1.0) as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..steps {
        let th = (k as f64 * step_deg).to_radians();
        let (s, c) = th.sin_cos();
        let proj: Vec<(f64, f64)> = xy.iter().map(|p| (c * p[0] + s * p[1], -s * p[0] + c * p[1])).collect();
        let (mut lo1, mut hi1, mut lo2, mut hi2) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(a, b) in &proj {
            lo1 = lo1.min(a);
            hi1 = hi1.max(a);
            lo2 = lo2.min(b);
            hi2 = hi2.max(b);
        }
        let closeness: f64 = proj
            .iter()
            .map(|&(a, b)| {
                let d = (a - lo1).min(hi1 - a).min((b - lo2).min(hi2 - b));
                1.0 / d.max(0.01)
            })
            .sum();
        if closeness > best.0 {
            best = (closeness, th);
        }
    }
    best.1
}

// Grows [lo, hi] to at least `len`, keeping the face nearer the sensor
// (which sits at projection 0) fixed.
fn complete(lo: f64, hi: f64, len: f64) -> (f64, f64) {
    if hi - lo >= len {
        return (lo, hi);
    }
    if lo >= 0.0 {
        (lo, lo + len)
    } else if hi <= 0.0 {
        (hi - len, hi)
    } else {
        let mid = 0.5 * (lo + hi);
        (mid - len / 2.0, mid + len / 2.0)
    }
}

/// Fits one box to a cluster of sensor-frame points.
pub fn fit_box(pc: &TimedPointCloud, members: &[usize], sensor_height: f64, cfg: &DetectorConfig) -> BBox {
    let xy: Vec<[f64; 2]> = members.iter().map(|&i| [pc.points[i].x, pc.points[i].y]).collect();
    let th = best_heading(&xy, cfg.yaw_step_deg);
    let (s, c) = th.sin_cos();
    let (mut lo1, mut hi1, mut lo2, mut hi2) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &xy {
        let (a, b) = (c * p[0] + s * p[1], -s * p[0] + c * p[1]);
        lo1 = lo1.min(a);
        hi1 = hi1.max(a);
        lo2 = lo2.min(b);
        hi2 = hi2.max(b);
    }
    // the longer observed side is the vehicle length, except that a cluster
    // no wider than a vehicle in either direction is an end seen along the
    // line of sight, so the length runs away from the sensor
    let (e1, e2) = (hi1 - lo1, hi2 - lo2);
    let end_on = e1.max(e2) <= 1.3 * cfg.prior_dims[1];
    let first_is_long = if end_on {
        let (mx, my) = xy.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
        let bearing = my.atan2(mx);
        (th - bearing).cos().abs() >= (th - bearing).sin().abs()
    } else {
        e1 >= e2
    };
    let (len1, len2) = if first_is_long { (cfg.prior_dims[0], cfg.prior_dims[1]) } else { (cfg.prior_dims[1], cfg.prior_dims[0]) };
    let (lo1, hi1) = complete(lo1, hi1, len1);
    let (lo2, hi2) = complete(lo2, hi2, len2);
    let (m1, m2) = (0.5 * (lo1 + hi1), 0.5 * (lo2 + hi2));
    let (cx, cy) = (c * m1 - s * m2, s * m1 + c * m2);
    let (l, w, yaw) = if first_is_long { (hi1 - lo1, hi2 - lo2, th) } else { (hi2 - lo2, hi1 - lo1, th + FRAC_PI_2) };
    let top = members.iter().map(|&i| pc.points[i].z).fold(f64::NEG_INFINITY, f64::max);
    let h = (top + sensor_height).max(cfg.prior_dims[2] * 0.5);
    let t = members.iter().map(|&i| pc.points[i].t).sum::<f64>() / members.len() as f64;
    BBox {
        cx,
        cy,
        cz: -sensor_height + h / 2.0,
        l,
        w,
        h,
        yaw: canonical_heading(yaw),
        score: 1.0 - (-(members.len() as f64) / 40.0).exp(),
        t,
    }
}

/// Folds a heading into `[−π/2, π/2)`; box geometry is symmetric under π.
pub fn canonical_heading(yaw: f64) -> f64 {
    let y = wrap_angle(yaw);
    if y >= FRAC_PI_2 {
        y - PI
    } else if y < -FRAC_PI_2 {
        y + PI
    } else {
        y
    }
}

/// Above-ground, non-free point indices.
pub fn object_points(pc: &TimedPointCloud, sensor_height: f64, clearance: f64) -> Vec<usize> {
    (0..pc.len())
        .filter(|&i| {
            let p = &pc.points[i];
            !p.free && p.z > -sensor_height + clearance
        })
        .collect()
}

/// Boxes in the cloud's own frame, ordered by descending score.
pub fn detect_boxes(pc: &TimedPointCloud, sensor_height: f64, cfg: &DetectorConfig) -> Vec<BBox> {
    let idx = object_points(pc, sensor_height, cfg.ground_clearance);
    let mut clusters: Vec<Vec<usize>> =
        cluster_points(pc, &idx, cfg.cell, cfg.link_cells).into_iter().filter(|m| m.len() >= cfg.min_points).collect();
    let mut fitted: Vec<BBox> = clusters.iter().map(|m| fit_box(pc, m, sensor_height, cfg)).collect();
    // sparse returns can split one vehicle; fragments whose completed boxes
    // overlap are refitted together
    'merge: loop {
        for i in 0..fitted.len() {
            for j in (i + 1)..fitted.len() {
                if bev_iou(&fitted[i], &fitted[j]) > 0.0 {
                    let mut joint = clusters[i].clone();
                    joint.extend(&clusters[j]);
                    joint.sort_unstable();
                    let refit = fit_box(pc, &joint, sensor_height, cfg);
                    // two vehicles parked close together stay apart
                    if refit.l > 1.2 * cfg.prior_dims[0] || refit.w > 1.5 * cfg.prior_dims[1] {
                        continue;
                    }
                    clusters.swap_remove(j);
                    fitted.swap_remove(j);
                    clusters[i] = joint;
                    fitted[i] = refit;
                    continue 'merge;
                }
            }
        }
        break;
    }
    let mut boxes: Vec<BBox> = fitted.into_iter().filter(|b| b.l <= cfg.max_extent).collect();
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cx.total_cmp(&b.cx)).then(a.cy.total_cmp(&b.cy)));
    boxes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub max_queries: usize,
    pub feature_width: usize,
    /// BEV density cell (m).
    pub cell: f64,
    pub ground_clearance: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { max_queries: 1024, feature_width: 256, cell: 0.8, ground_clearance: 0.2 }
    }
}

/// One query per detected box, then the densest BEV cells, truncated to the
/// best `max_queries` by score.
///
/// Density cells score below 0.5 so detections rank first. A cell query
/// carries the mean timestamp of its points.
pub fn select_queries(pc: &TimedPointCloud, boxes: &[BBox], sensor_height: f64, cfg: &QueryConfig) -> Vec<Query> {
    let width = cfg.feature_width;
    let mut out: Vec<Query> = boxes
        .iter()
        .map(|b| {
            let mut f = vec![0.0f32; width];
            let vals = [1.0, b.l, b.w, b.h, b.yaw.cos(), b.yaw.sin(), b.score];
            for (slot, v) in f.iter_mut().zip(vals) {
                *slot = v as f32;
            }
            Query::new(b.cx, b.cy, b.score, b.t, f)
        })
        .collect();

    // cell -> (points, above-ground points, z sum, t sum)
    let mut cells: BTreeMap<(i64, i64), (usize, usize, f64, f64)> = BTreeMap::new();
    for p in &pc.points {
        let e = cells.entry(cell_of(p.x, p.y, cfg.cell)).or_default();
        e.0 += 1;
        if !p.free && p.z > -sensor_height + cfg.ground_clearance {
            e.1 += 1;
        }
        e.2 += p.z;
        e.3 += p.t;
    }
    let mut dense: Vec<Query> = cells
        .iter()
        .map(|(&(i, j), &(n, n_obj, zs, ts))| {
            let score = 0.45 * (1.0 - (-(n_obj as f64) / 10.0).exp()) + 0.04 * (1.0 - (-(n as f64) / 10.0).exp());
            let mut f = vec![0.0f32; width];
            let vals = [0.0, n_obj as f64 / 10.0, n as f64 / 10.0, zs / n as f64 + sensor_height];
            for (slot, v) in f.iter_mut().zip(vals) {
                *slot = v as f32;
            }
            Query::new((i as f64 + 0.5) * cfg.cell, (j as f64 + 0.5) * cfg.cell, score, ts / n as f64, f)
        })
        .collect();
    // stable sort keeps cell order among equal scores
    dense.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.extend(dense);
    out.truncate(cfg.max_queries);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    pub center_sigma: f64,
    pub yaw_sigma_deg: f64,
    pub dims_sigma: f64,
    /// Actors need this many returns in the scan to be detected.
    pub min_points: usize,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self { center_sigma: 0.1, yaw_sigma_deg: 1.0, dims_sigma: 0.05, min_points: 10 }
    }
}

/// Noisy ground-truth boxes at time `t` for every actor the scan saw,
/// expressed in agent `a`'s sensor frame at the scan start. Returns actor
/// indices alongside.
pub fn oracle_detections<R: Rng + ?Sized>(
    scene: &Scene,
    a: usize,
    scan: &LabeledScan,
    t: f64,
    noise: &OracleNoise,
    rng: &mut R,
) -> Vec<(usize, BBox)> {
    let frame = scene.agent_pose(a, scan.t_start).inverse();
    let hits = scan.hits_per_actor(scene.actors.len());
    let mut out = Vec::new();
    for (i, &n) in hits.iter().enumerate() {
        if n < noise.min_points {
            continue;
        }
        let mut g: f64 = rng.sample(StandardNormal);
        let mut b = scene.actors[i].state_at(t).transformed(&frame);
        b.cx += noise.center_sigma * g;
        g = rng.sample(StandardNormal);
        b.cy += noise.center_sigma * g;
        g = rng.sample(StandardNormal);
        b.yaw = wrap_angle(b.yaw + (noise.yaw_sigma_deg * g).to_radians());
        for d in [&mut b.l, &mut b.w, &mut b.h] {
            g = rng.sample(StandardNormal);
            *d = (*d + noise.dims_sigma * g).max(0.1);
        }
        b.score = 1.0 - (-(n as f64) / 40.0).exp();
        b.t = t;
        out.push((i, b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bev_iou, Frame, TimedPoint};
    use crate::sim::lidar::{deskew, lidar_scan_labeled};
    use crate::sim::scenario::ScenarioConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn box_outline(b: &BBox, n: usize, h: f64) -> TimedPointCloud {
        let c = b.bev_corners();
        let mut pts = Vec::new();
        for e in 0..4 {
            let (p, q) = (c[e], c[(e + 1) % 4]);
            for k in 0..n {
                let f = k as f64 / n as f64;
                pts.push(TimedPoint::new(p[0] + f * (q[0] - p[0]), p[1] + f * (q[1] - p[1]), -h + 1.0, 0.05));
            }
        }
        TimedPointCloud::from_points(pts, Frame::Ego)
    }

    #[test]
    fn full_outline_is_recovered() {
        let truth = BBox::new([10.0, 3.0, -1.1], [4.5, 2.0, 1.6], 0.35);
        let pc = box_outline(&truth, 40, 1.9);
        let boxes = detect_boxes(&pc, 1.9, &DetectorConfig::default());
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!((b.cx - 10.0).abs() < 0.05 && (b.cy - 3.0).abs() < 0.05, "{b:?}");
        assert!((b.yaw - 0.35).abs() < 1.5f64.to_radians());
        assert!(bev_iou(&b, &truth) > 0.9);
    }

    #[test]
    fn l_shape_is_completed_away_from_the_sensor() {
        // only the near end (x = 8) and the sensor-facing side (y = 1) are seen
        let mut pts = Vec::new();
        for k in 0..20 {
            pts.push(TimedPoint::new(8.0, 1.0 + 2.0 * k as f64 / 20.0, -0.9, 0.0));
            pts.push(TimedPoint::new(8.0 + 4.5 * k as f64 / 20.0, 1.0, -0.9, 0.0));
        }
        let pc = TimedPointCloud::from_points(pts, Frame::Ego);
        let b = detect_boxes(&pc, 1.9, &DetectorConfig::default())[0];
        assert!((b.cx - 10.25).abs() < 0.15 && (b.cy - 2.0).abs() < 0.15, "{b:?}");
    }

    #[test]
    fn partial_side_extends_outward() {
        assert_eq!(complete(2.0, 2.5, 2.0), (2.0, 4.0));
        assert_eq!(complete(-2.5, -2.0, 2.0), (-4.0, -2.0));
        assert_eq!(complete(-0.5, 0.5, 2.0), (-1.0, 1.0));
        assert_eq!(complete(0.0, 5.0, 2.0), (0.0, 5.0));
    }

    #[test]
    fn headings_fold_into_half_circle() {
        assert!((canonical_heading(PI) - 0.0).abs() < 1e-12);
        assert!((canonical_heading(FRAC_PI_2) + FRAC_PI_2).abs() < 1e-12);
        assert!((canonical_heading(-2.0) - (PI - 2.0)).abs() < 1e-12);
    }

    fn scene() -> Scene {
        let text = "seed = 1\nduration = 1.0\n[lidar]\nrings = 32\nazimuth_step_deg = 0.4\n\
                    [[agents]]\nid = 0\nx = 0.0\ny = 0.0\n\
                    [[vehicles]]\nx = 12.0\ny = 4.0\nyaw_deg = 20.0\n\
                    [[vehicles]]\nx = -15.0\ny = -3.0\n";
        Scene::build(&ScenarioConfig::from_toml_str(text).unwrap()).unwrap()
    }

    #[test]
    fn simulated_vehicles_are_detected() {
        let s = scene();
        let scan = lidar_scan_labeled(&s, 0, 0.0);
        let pc = deskew(&scan.cloud, |t| s.agent_pose(0, t), 0.0);
        let boxes = detect_boxes(&pc, 1.9, &DetectorConfig::default());
        assert_eq!(boxes.len(), 2, "{boxes:?}");
        let frame = s.agent_pose(0, 0.0).inverse();
        for gt in &s.actors[1..] {
            let g = gt.initial.transformed(&frame);
            let best = boxes.iter().map(|b| bev_iou(b, &g)).fold(0.0, f64::max);
            assert!(best > 0.5, "iou {best} gt {g:?} boxes {boxes:?}");
        }
    }

    #[test]
    fn car_seen_from_behind_keeps_its_heading() {
        let text = "seed = 1\nduration = 1.0\n[lidar]\nrings = 32\nazimuth_step_deg = 0.4\n\
                    [[agents]]\nid = 0\nx = 0.0\ny = 0.0\n[[vehicles]]\nx = 20.0\ny = 0.0\n";
        let s = Scene::build(&ScenarioConfig::from_toml_str(text).unwrap()).unwrap();
        let scan = lidar_scan_labeled(&s, 0, 0.0);
        let b = detect_boxes(&scan.cloud, 1.9, &DetectorConfig::default())[0];
        assert!(b.yaw.abs() < 2f64.to_radians(), "{b:?}");
        assert!(bev_iou(&b, &s.actors[1].initial) > 0.8, "{b:?}");
    }

    #[test]
    fn queries_rank_detections_first() {
        let s = scene();
        let scan = lidar_scan_labeled(&s, 0, 0.0);
        let boxes = detect_boxes(&scan.cloud, 1.9, &DetectorConfig::default());
        let qs = select_queries(&scan.cloud, &boxes, 1.9, &QueryConfig::default());
        assert_eq!(qs.len(), 1024);
        assert!(qs.iter().all(|q| q.feature.len() == 256));
        for (q, b) in qs.iter().zip(&boxes) {
            assert_eq!((q.x, q.y), (b.cx, b.cy));
        }
        assert!(qs[boxes.len()..].iter().all(|q| q.score < 0.5));
        let small = select_queries(&scan.cloud, &boxes, 1.9, &QueryConfig { max_queries: 5, ..QueryConfig::default() });
        assert_eq!(small.len(), 5);
    }

    #[test]
    fn oracle_sees_only_hit_actors() {
        let s = scene();
        let scan = lidar_scan_labeled(&s, 0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = OracleNoise { center_sigma: 0.0, yaw_sigma_deg: 0.0, dims_sigma: 0.0, min_points: 1 };
        let dets = oracle_detections(&s, 0, &scan, 0.0, &zero, &mut rng);
        assert_eq!(dets.iter().map(|d| d.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!((dets[0].1.cx - 12.0).abs() < 1e-12);
    }
}
