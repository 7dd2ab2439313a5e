//! Free-space augmentation and flip/rotate augmentation of point clouds.
//!
//! Free-space points fill the ground gap between the returns of two
//! vertically adjacent rings at the same azimuth. Everything the ray passed
//! through is known to be empty, so those points mark observed free space
//! and connect otherwise disjoint scan rings.

use crate::geometry::{wrap_angle, BBox, TimedPoint, TimedPointCloud};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use thiserror::Error;

/// Default spacing between inserted free-space points, in meters.
pub const DEFAULT_FSA_SPACING: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("ray does not reach the ground between rings (d={d}, h={h}, alpha={alpha})")]
    NoGroundGap { d: f64, h: f64, alpha: f64 },
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("rotation {0} rad outside [-pi/2, pi/2]")]
    BadRotation(f64),
    #[error("invalid lidar model: {0}")]
    BadModel(&'static str),
}

/// Spinning multi-ring LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    /// Sensor height above the ground plane (m).
    pub height: f64,
    /// Ring elevation angles, strictly increasing (rad, negative = downward).
    pub ring_inclinations: Vec<f64>,
    /// Horizontal angle between consecutive firings (rad).
    pub azimuth_step: f64,
    /// Duration of one full revolution (s).
    pub sweep_time: f64,
    /// Returns beyond this range are dropped (m).
    pub max_range: f64,
}

impl Default for LidarModel {
    /// 64 rings spread over [-25°, +3°], 0.2° azimuth step, 100 ms sweep.
    fn default() -> Self {
        Self::uniform(64, -25.0, 3.0, 0.2, 1.9)
    }
}

impl LidarModel {
    /// Evenly spaced rings between two elevations, angles given in degrees.
    pub fn uniform(rings: usize, lowest_deg: f64, highest_deg: f64, azimuth_step_deg: f64, height: f64) -> Self {
        let ring_inclinations = if rings < 2 {
            vec![lowest_deg.to_radians()]
        } else {
            (0..rings)
                .map(|i| (lowest_deg + (highest_deg - lowest_deg) * i as f64 / (rings - 1) as f64).to_radians())
                .collect()
        };
        Self { height, ring_inclinations, azimuth_step: azimuth_step_deg.to_radians(), sweep_time: 0.1, max_range: 120.0 }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.height > 0.0) {
            return Err(AugmentError::BadModel("height must be positive"));
        }
        if self.ring_inclinations.is_empty() || self.ring_inclinations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AugmentError::BadModel("ring inclinations must be non-empty and strictly increasing"));
        }
        if !(self.azimuth_step > 0.0) || !(self.sweep_time > 0.0) || !(self.max_range > 0.0) {
            return Err(AugmentError::BadModel("azimuth step, sweep time and max range must be positive"));
        }
        Ok(())
    }

    pub fn azimuth_bins(&self) -> usize {
        (TAU / self.azimuth_step).round() as usize
    }

    /// Ground distance of a ring's ray on flat ground, if it points downward.
    pub fn ground_radius(&self, ring: usize) -> Option<f64> {
        let incl = self.ring_inclinations[ring];
        (incl < 0.0).then(|| self.height / (-incl).tan())
    }
}

/// Ground gap between ray `i` (ground distance `d`) and the next steeper ray
/// `alpha` radians below it: `d − h·tan(atan(d/h) − alpha)`.
pub fn fsa_gap(d: f64, h: f64, alpha: f64) -> Result<f64, AugmentError> {
    let from_vertical = (d / h).atan();
    // the steeper ray may point straight down (tan 0 = 0), but not past it
    let steeper = from_vertical - alpha;
    if !(d > 0.0) || !(h > 0.0) || steeper < -1e-12 || alpha < 0.0 {
        return Err(AugmentError::NoGroundGap { d, h, alpha });
    }
    Ok((d - h * steeper.max(0.0).tan()).max(0.0))
}

/// Inserts free-space points between ground returns of adjacent rings.
///
/// The cloud must be in the sensor frame (ground at `z = −height`). A return
/// counts as a ground hit for ring `i` when it lies on the ground plane at
/// that ring's nominal ground radius. For every azimuth where rings `i` and
/// `i + 1` both hit the ground, points are spread evenly strictly between the
/// two radii, at most `spacing` apart, with timestamps interpolated between
/// the two returns.
pub fn fsa_augment(pc: &TimedPointCloud, model: &LidarModel, spacing: f64) -> Result<TimedPointCloud, AugmentError> {
    if !(spacing > 0.0) {
        return Err(AugmentError::BadSpacing(spacing));
    }
    model.validate()?;
    let ground = ground_hits(pc, model);
    let mut keys: Vec<&(usize, usize)> = ground.keys().collect();
    keys.sort_unstable();

    let mut out = pc.clone();
    for &(bin, ring) in keys {
        let Some(far) = ground.get(&(bin, ring + 1)) else { continue };
        let near = &ground[&(bin, ring)];
        let (r_near, r_far) = (near.x.hypot(near.y), far.x.hypot(far.y));
        let gap = r_far - r_near;
        if gap <= spacing {
            continue;
        }
        let n = (gap / spacing).ceil() as usize - 1;
        let (s, c) = near.y.atan2(near.x).sin_cos();
        for k in 1..=n {
            let frac = k as f64 / (n + 1) as f64;
            let r = r_near + frac * gap;
            out.points.push(TimedPoint {
                x: r * c,
                y: r * s,
                z: -model.height,
                t: near.t + frac * (far.t - near.t),
                free: true,
            });
        }
    }
    Ok(out)
}

// (azimuth bin, ring) -> ground return
fn ground_hits(pc: &TimedPointCloud, model: &LidarModel) -> HashMap<(usize, usize), TimedPoint> {
    let bins = model.azimuth_bins();
    let h = model.height;
    let mut hits = HashMap::new();
    for p in pc.points.iter().filter(|p| !p.free) {
        if (p.z + h).abs() > 0.02 {
            continue;
        }
        let r = p.x.hypot(p.y);
        if r <= 0.0 {
            continue;
        }
        let incl = (-h).atan2(r);
        let ring = nearest_ring(&model.ring_inclinations, incl);
        let Some(expect) = model.ground_radius(ring) else { continue };
        if (r - expect).abs() > 0.01 * expect.max(1.0) {
            continue;
        }
        let az = p.y.atan2(p.x).rem_euclid(TAU);
        let bin = ((az / model.azimuth_step).round() as usize) % bins;
        hits.entry((bin, ring)).or_insert(*p);
    }
    hits
}

fn nearest_ring(incl: &[f64], a: f64) -> usize {
    let i = incl.partition_point(|&v| v < a);
    match i {
        0 => 0,
        n if n == incl.len() => n - 1,
        n => {
            if (a - incl[n - 1]) <= (incl[n] - a) {
                n - 1
            } else {
                n
            }
        }
    }
}

/// Mirrors and rotates points and boxes consistently.
///
/// `flip_x` negates x (yaw φ → π − φ), `flip_y` negates y (yaw φ → −φ),
/// then everything is rotated by `yaw` about the z axis.
pub fn flip_rotate(
    pc: &TimedPointCloud,
    boxes: &[BBox],
    flip_x: bool,
    flip_y: bool,
    yaw: f64,
) -> Result<(TimedPointCloud, Vec<BBox>), AugmentError> {
    if !(-FRAC_PI_2..=FRAC_PI_2).contains(&yaw) {
        return Err(AugmentError::BadRotation(yaw));
    }
    let sx = if flip_x { -1.0 } else { 1.0 };
    let sy = if flip_y { -1.0 } else { 1.0 };
    let (s, c) = yaw.sin_cos();
    let map = |x: f64, y: f64| {
        let (x, y) = (sx * x, sy * y);
        (c * x - s * y, s * x + c * y)
    };
    let points = pc
        .points
        .iter()
        .map(|p| {
            let (x, y) = map(p.x, p.y);
            TimedPoint { x, y, ..*p }
        })
        .collect();
    let boxes = boxes
        .iter()
        .map(|b| {
            let (cx, cy) = map(b.cx, b.cy);
            let mut heading = b.yaw;
            if flip_x {
                heading = PI - heading;
            }
            if flip_y {
                heading = -heading;
            }
            BBox { cx, cy, yaw: wrap_angle(heading + yaw), ..*b }
        })
        .collect();
    Ok((TimedPointCloud { points, frame: pc.frame }, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    // independent route: intersect the steeper ray with the plane z = -h
    fn gap_by_ray_casting(d: f64, h: f64, alpha: f64) -> f64 {
        let depression = h.atan2(d) + alpha;
        let (dir_x, dir_z) = (depression.cos(), -depression.sin());
        let t = -h / dir_z;
        d - t * dir_x
    }

    #[test]
    fn gap_examples() {
        assert_eq!(fsa_gap(7.0, 1.5, 0.0).unwrap(), 0.0);
        assert!((fsa_gap(1.0, 1.0, FRAC_PI_4).unwrap() - 1.0).abs() < 1e-12);
        let g = fsa_gap(20.0, 2.0, 0.01).unwrap();
        assert!((g - gap_by_ray_casting(20.0, 2.0, 0.01)).abs() < 1e-12);
        assert!((g - 1.836_419_285_8).abs() < 1e-9, "{g}");
    }

    #[test]
    fn gap_domain_errors() {
        assert!(fsa_gap(1.0, 1.0, FRAC_PI_4 + 0.1).is_err());
        assert!(fsa_gap(0.0, 1.0, 0.1).is_err());
        assert!(fsa_gap(1.0, -1.0, 0.1).is_err());
    }

    fn two_ring_model() -> LidarModel {
        let h = 2.0f64;
        LidarModel {
            height: h,
            ring_inclinations: vec![-(h / 10.0).atan(), -(h / 12.0).atan()],
            azimuth_step: 1.0f64.to_radians(),
            sweep_time: 0.1,
            max_range: 100.0,
        }
    }

    fn ring_points(model: &LidarModel, radii: &[f64], azimuths: &[f64]) -> TimedPointCloud {
        let mut pts = Vec::new();
        for &az in azimuths {
            for &r in radii {
                let t = az / TAU * model.sweep_time;
                pts.push(TimedPoint::new(r * az.cos(), r * az.sin(), -model.height, t));
            }
        }
        TimedPointCloud::from_points(pts, Frame::Ego)
    }

    #[test]
    fn augment_examples() {
        let model = two_ring_model();
        let empty = TimedPointCloud::new(Frame::Ego);
        assert!(fsa_augment(&empty, &model, 1.0).unwrap().is_empty());

        let one_ring = ring_points(&model, &[10.0], &[0.0, 0.5]);
        assert_eq!(fsa_augment(&one_ring, &model, 1.0).unwrap().len(), one_ring.len());

        let azimuths: Vec<f64> = (0..10).map(|i| (i as f64 * 3.0).to_radians()).collect();
        let two = ring_points(&model, &[10.0, 12.0], &azimuths);
        let out = fsa_augment(&two, &model, 1.0).unwrap();
        let free: Vec<_> = out.points.iter().filter(|p| p.free).collect();
        assert!(free.len() >= azimuths.len() && free.len() <= 2 * azimuths.len());
        for p in free {
            let r = p.x.hypot(p.y);
            assert!(r > 10.0 && r < 12.0);
            assert_eq!(p.z, -model.height);
        }
    }

    #[test]
    fn augment_rejects_bad_spacing() {
        let model = LidarModel::default();
        let pc = TimedPointCloud::new(Frame::Ego);
        assert_eq!(fsa_augment(&pc, &model, 0.0).unwrap_err(), AugmentError::BadSpacing(0.0));
    }

    #[test]
    fn flip_rotate_examples() {
        let pc = TimedPointCloud::from_points(vec![TimedPoint::new(1.0, 2.0, 0.5, 0.0)], Frame::Ego);
        let b = BBox::new([1.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.3);
        let (p, bx) = flip_rotate(&pc, &[b], false, false, 0.0).unwrap();
        assert_eq!((p, bx), (pc.clone(), vec![b]));

        let (p, bx) = flip_rotate(&pc, &[b], true, false, 0.0).unwrap();
        assert_eq!((p.points[0].x, p.points[0].y), (-1.0, 2.0));
        assert!((bx[0].yaw - wrap_angle(PI - 0.3)).abs() < 1e-12);

        let heading0 = BBox::new([1.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
        let (_, bx) = flip_rotate(&pc, &[heading0], false, false, FRAC_PI_2).unwrap();
        assert!(bx[0].cx.abs() < 1e-12 && (bx[0].cy - 1.0).abs() < 1e-12);
        assert!((bx[0].yaw - FRAC_PI_2).abs() < 1e-12);
        assert!(flip_rotate(&pc, &[], false, false, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn gap_matches_ray_casting(d in 0.5..100.0f64, h in 0.5..4.0f64, frac in 0.0..0.99f64) {
            let alpha = frac * (d / h).atan();
            let g = fsa_gap(d, h, alpha).unwrap();
            prop_assert!((g - gap_by_ray_casting(d, h, alpha)).abs() < 1e-9 * d.max(1.0));
            prop_assert!(g >= 0.0);
        }

        #[test]
        fn flip_rotate_preserves_containment(
            fx in any::<bool>(), fy in any::<bool>(), yaw in -FRAC_PI_2..FRAC_PI_2,
            bx in -20.0..20.0f64, by in -20.0..20.0f64, byaw in -PI..PI,
            u in -0.99..0.99f64, v in -0.99..0.99f64,
        ) {
            let b = BBox::new([bx, by, 0.75], [4.0, 2.0, 1.5], byaw);
            let (s, c) = byaw.sin_cos();
            let (lx, ly) = (u * 2.0, v * 1.0);
            let p = TimedPoint::new(bx + c * lx - s * ly, by + s * lx + c * ly, 0.5, 0.0);
            let pc = TimedPointCloud::from_points(vec![p], Frame::Ego);
            let (pc2, boxes) = flip_rotate(&pc, &[b], fx, fy, yaw).unwrap();
            prop_assert!(boxes[0].contains(pc2.points[0].xyz()));
        }
    }
}
