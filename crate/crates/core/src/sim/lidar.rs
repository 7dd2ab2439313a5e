//! Rolling-shutter LiDAR ray casting against moving oriented boxes.
//!
//! Firing `k` of a sweep starting at `t_start` happens at
//! `t_start + (k·step / 2π)·sweep_time`; all rings of one firing share that
//! time. Sensor and actors are evaluated at the firing time, so moving
//! vehicles smear across a sweep. Raw returns are expressed in the sensor
//! frame of their own firing time; [`deskew`] moves them into one frame.

use super::scenario::{Actor, Scene};
use crate::geometry::{BBox, Frame, Pose, TimedPoint, TimedPointCloud};
use std::f64::consts::TAU;

/// Distance along a unit ray to the first entry into `b`, if the ray
/// starts outside the box.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &BBox) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = (origin[0] - b.cx, origin[1] - b.cy);
    let o = [c * ox + s * oy, -s * ox + c * oy, origin[2] - b.cz];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let bnd = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bnd));
        t1 = t1.min(a.max(bnd));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// A scan plus, per point, the index of the actor it hit (`None` = ground).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub cloud: TimedPointCloud,
    pub labels: Vec<Option<usize>>,
    pub t_start: f64,
}

impl LabeledScan {
    /// Number of returns on each actor.
    pub fn hits_per_actor(&self, n_actors: usize) -> Vec<usize> {
        let mut hits = vec![0; n_actors];
        for l in self.labels.iter().flatten() {
            hits[*l] += 1;
        }
        hits
    }
}

/// Raw sweep of agent `a` starting at `t_start`.
pub fn lidar_scan(scene: &Scene, a: usize, t_start: f64) -> TimedPointCloud {
    lidar_scan_labeled(scene, a, t_start).cloud
}

pub fn lidar_scan_labeled(scene: &Scene, a: usize, t_start: f64) -> LabeledScan {
    let model = &scene.lidar;
    let own = scene.agents[a].actor;
    let bins = model.azimuth_bins();
    let ring_dirs: Vec<(f64, f64)> = model.ring_inclinations.iter().map(|i| (i.cos(), i.sin())).collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut candidates: Vec<BBox> = Vec::new();
    let mut candidate_ids: Vec<usize> = Vec::new();

    for k in 0..bins {
        let az = k as f64 * model.azimuth_step;
        let t = t_start + az / TAU * model.sweep_time;
        let pose = scene.agent_pose(a, t);
        let world_az = pose.yaw + az;
        let (sa, ca) = world_az.sin_cos();
        collect_candidates(&scene.actors, own, &pose, world_az, t, model.max_range, &mut candidates, &mut candidate_ids);

        for &(ci, si) in &ring_dirs {
            let dir = [ci * ca, ci * sa, si];
            let origin = [pose.x, pose.y, pose.z];
            let mut best = f64::INFINITY;
            let mut label = None;
            if si < 0.0 {
                best = pose.z / -si;
            }
            for (b, &id) in candidates.iter().zip(&candidate_ids) {
                if let Some(r) = ray_box(origin, dir, b) {
                    if r < best {
                        best = r;
                        label = Some(id);
                    }
                }
            }
            if !(best <= model.max_range) {
                continue;
            }
            let hit = [origin[0] + best * dir[0], origin[1] + best * dir[1], origin[2] + best * dir[2]];
            let local = pose.inverse().apply(hit);
            // ground returns sit exactly on the plane in the sensor frame
            let z = if label.is_none() { -pose.z } else { local[2] };
            points.push(TimedPoint::new(local[0], local[1], z, t));
            labels.push(label);
        }
    }
    LabeledScan { cloud: TimedPointCloud::from_points(points, Frame::Agent(scene.agents[a].id)), labels, t_start }
}

// Actors whose bounding circle the vertical plane at `world_az` can cross.
#[allow(clippy::too_many_arguments)]
fn collect_candidates(
    actors: &[Actor],
    own: usize,
    pose: &Pose,
    world_az: f64,
    t: f64,
    max_range: f64,
    boxes: &mut Vec<BBox>,
    ids: &mut Vec<usize>,
) {
    boxes.clear();
    ids.clear();
    let (s, c) = world_az.sin_cos();
    for (i, actor) in actors.iter().enumerate() {
        if i == own {
            continue;
        }
        let b = actor.state_at(t);
        let (dx, dy) = (b.cx - pose.x, b.cy - pose.y);
        let radius = 0.5 * b.l.hypot(b.w);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        if across.abs() > radius || along < -radius || along - radius > max_range {
            continue;
        }
        boxes.push(b);
        ids.push(i);
    }
}

/// Re-expresses every point in the sensor frame at `t_ref`, using the
/// sensor trajectory `pose_at`.
pub fn deskew(pc: &TimedPointCloud, pose_at: impl Fn(f64) -> Pose, t_ref: f64) -> TimedPointCloud {
    let reference_inv = pose_at(t_ref).inverse();
    let points = pc
        .points
        .iter()
        .map(|p| {
            let w = pose_at(p.t).apply(p.xyz());
            let [x, y, z] = reference_inv.apply(w);
            TimedPoint { x, y, z, ..*p }
        })
        .collect();
    TimedPointCloud { points, frame: pc.frame }
}

/// Binary dump: `x, y, z, t` as little-endian `f32`, 16 bytes per point.
pub fn scan_to_bytes(pc: &TimedPointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.t] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn scan_from_bytes(bytes: &[u8], frame: Frame) -> Option<TimedPointCloud> {
    if bytes.len() % 16 != 0 {
        return None;
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64;
    let points = bytes
        .chunks_exact(16)
        .map(|r| TimedPoint::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16])))
        .collect();
    Some(TimedPointCloud::from_points(points, frame))
}
