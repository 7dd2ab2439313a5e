//! Poses, oriented boxes, timed point clouds and box overlap.
//!
//! Rotation is yaw-only: `z` is carried through every transform but never
//! rotated into `x`/`y`.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Wraps an angle into the half-open interval `[-π, π)`.
///
/// `π` itself maps to `-π`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut w = a - TAU * ((a + PI) / TAU).floor();
    // floor() can land exactly on the upper bound after rounding
    if w >= PI {
        w -= TAU;
    }
    if w < -PI {
        w += TAU;
    }
    w
}

/// Signed smallest difference `a - b`, wrapped to `[-π, π)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Planar rigid pose with a carried height: `(x, y, z, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, yaw: 0.0 }
    }

    /// Builds a pose, normalizing `yaw`.
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { x, y, z, yaw: wrap_angle(yaw) }
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(x, y, 0.0, yaw)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(
            c * other.x - s * other.y + self.x,
            s * other.x + c * other.y + self.y,
            self.z + other.z,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.z,
            -self.yaw,
        )
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y, p[2] + self.z]
    }

    pub fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let [px, py, _] = self.apply([x, y, 0.0]);
        (px, py)
    }

    /// Rotates a direction (no translation).
    pub fn rotate_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y, s * x + c * y)
    }

    /// Row-major 3×3 rotation matrix of the yaw.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.yaw.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Largest absolute component difference, with yaw compared on the circle.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.x - other.x)
            .abs()
            .max((self.y - other.y).abs())
            .max((self.z - other.z).abs())
            .max(angle_diff(self.yaw, other.yaw).abs())
    }
}

/// `a ∘ b`.
pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(p: &Pose) -> Pose {
    p.inverse()
}

/// Relative transform taking cooperative-frame coordinates into the ego
/// frame: `inverse(ego) · coop`.
pub fn relative_pose(ego: &Pose, coop: &Pose) -> Pose {
    ego.inverse().compose(coop)
}

/// Oriented 3D box. `(cx, cy, cz)` is the geometric center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub score: f64,
    pub t: f64,
}

impl BBox {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: wrap_angle(yaw),
            score: 1.0,
            t: 0.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0 && self.w > 0.0 && self.h > 0.0
    }

    pub fn bev_area(&self) -> f64 {
        self.l.max(0.0) * self.w.max(0.0)
    }

    pub fn volume(&self) -> f64 {
        self.bev_area() * self.h.max(0.0)
    }

    /// Counter-clockwise BEV corners.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [c * u - s * v + self.cx, s * u + c * v + self.cy])
    }

    /// Re-expresses the box in a parent frame given the pose of its frame.
    pub fn transformed(&self, pose: &Pose) -> BBox {
        let [cx, cy, cz] = pose.apply(self.center());
        BBox { cx, cy, cz, yaw: wrap_angle(self.yaw + pose.yaw), ..*self }
    }

    /// Closed BEV containment test (points on the edge count as inside).
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_local_xy(x, y);
        const EDGE_EPS: f64 = 1e-9;
        u.abs() <= self.l / 2.0 + EDGE_EPS && v.abs() <= self.w / 2.0 + EDGE_EPS
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_xy(p[0], p[1]) && (p[2] - self.cz).abs() <= self.h / 2.0 + 1e-9
    }

    /// Point coordinates in the box frame (length axis first).
    pub fn to_local_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Coordinate frame a point cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Ego,
    Agent(u32),
    World,
}

/// A LiDAR return or a synthetic free-space point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
    /// Set for free-space augmentation points.
    pub free: bool,
}

impl TimedPoint {
    pub fn new(x: f64, y: f64, z: f64, t: f64) -> Self {
        Self { x, y, z, t, free: false }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPointCloud {
    pub points: Vec<TimedPoint>,
    pub frame: Frame,
}

impl TimedPointCloud {
    pub fn new(frame: Frame) -> Self {
        Self { points: Vec::new(), frame }
    }

    pub fn from_points(points: Vec<TimedPoint>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(min t, max t)`, or `None` for an empty cloud.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        self.points.iter().fold(None, |acc, p| match acc {
            None => Some((p.t, p.t)),
            Some((lo, hi)) => Some((lo.min(p.t), hi.max(p.t))),
        })
    }

    /// Rigidly moves every point by `pose` and re-tags the cloud.
    pub fn transform(&self, pose: &Pose, frame: Frame) -> TimedPointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let [x, y, z] = pose.apply(p.xyz());
                TimedPoint { x, y, z, ..*p }
            })
            .collect();
        TimedPointCloud { points, frame }
    }
}

pub fn transform_points(pc: &TimedPointCloud, pose: &Pose, frame: Frame) -> TimedPointCloud {
    pc.transform(pose, frame)
}

const MERGE_EPS: f64 = 1e-12;

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = poly
        .iter()
        .zip(poly.iter().cycle().skip(1))
        .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
        .sum();
    twice / 2.0
}

/// Clips a convex polygon against a convex counter-clockwise clip polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for (i, &a) in clip.iter().enumerate() {
        if out.is_empty() {
            break;
        }
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for (j, &cur) in input.iter().enumerate() {
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
        dedup_vertices(&mut out);
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn dedup_vertices(poly: &mut Vec<[f64; 2]>) {
    let close = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).abs() <= MERGE_EPS && (a[1] - b[1]).abs() <= MERGE_EPS;
    poly.dedup_by(|a, b| close(a, b));
    while poly.len() > 1 && close(&poly[0], &poly[poly.len() - 1]) {
        poly.pop();
    }
}

/// BEV intersection area of two oriented boxes.
pub fn bev_intersection(a: &BBox, b: &BBox) -> f64 {
    if a.bev_area() <= 0.0 || b.bev_area() <= 0.0 {
        return 0.0;
    }
    // cheap reject on circumscribed circles
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

/// Bird's-eye-view IoU of the two footprints.
pub fn bev_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: BEV intersection times vertical overlap.
pub fn iou_3d(a: &BBox, b: &BBox) -> f64 {
    if a.volume() <= 0.0 || b.volume() <= 0.0 {
        return 0.0;
    }
    let z_lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let z_hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}
