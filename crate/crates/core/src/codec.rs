//! Regression targets for detection heads and heading codes.
//!
//! The compass-rose code expresses a heading `r` against four quadrant
//! anchors `[0, π/2, π, 3π/2]`: per anchor a `(cos, sin)` offset and a
//! proximity score `1 − angdist(r, anchor)/π`. Alternative heading codes
//! share the [`AngleEncoding`] interface for comparison harnesses.

use crate::geometry::{wrap_angle, BBox};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

pub const ANCHORS: [f64; 4] = [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2];

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("degenerate direction vector (norm {0:e})")]
    Degenerate(f64),
    #[error("expected {expected} code values, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompassCode {
    /// `cos r − cos anchor` for the four anchors, then `sin r − sin anchor`.
    pub dir_offsets: [f64; 8],
    pub scores: [f64; 4],
}

impl CompassCode {
    /// Index of the highest-scoring anchor; ties go to the lowest index.
    pub fn best_anchor(&self) -> usize {
        let mut best = 0;
        for a in 1..4 {
            if self.scores[a] > self.scores[best] {
                best = a;
            }
        }
        best
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.dir_offsets.iter().chain(&self.scores).copied().collect()
    }
}

pub fn compass_encode(angle: f64) -> CompassCode {
    let r = wrap_angle(angle);
    let (sr, cr) = r.sin_cos();
    let mut dir_offsets = [0.0; 8];
    let mut scores = [0.0; 4];
    for (a, &anchor) in ANCHORS.iter().enumerate() {
        let (sa, ca) = anchor.sin_cos();
        dir_offsets[a] = cr - ca;
        dir_offsets[4 + a] = sr - sa;
        scores[a] = 1.0 - (ca * cr + sa * sr).clamp(-1.0, 1.0).acos() / PI;
    }
    CompassCode { dir_offsets, scores }
}

/// Recovers the heading from the best-scoring anchor plus its offsets.
pub fn compass_decode(code: &CompassCode) -> Result<f64, CodecError> {
    let a = code.best_anchor();
    let (sa, ca) = ANCHORS[a].sin_cos();
    let (x, y) = (ca + code.dir_offsets[a], sa + code.dir_offsets[4 + a]);
    let norm = x.hypot(y);
    if norm < 1e-9 {
        return Err(CodecError::Degenerate(norm));
    }
    Ok(wrap_angle(y.atan2(x)))
}

/// A heading code usable as a regression target.
pub trait AngleEncoding {
    fn name(&self) -> &'static str;
    fn width(&self) -> usize;
    fn encode(&self, angle: f64) -> Vec<f64>;
    fn decode(&self, code: &[f64]) -> Result<f64, CodecError>;
}

fn check_len(code: &[f64], expected: usize) -> Result<(), CodecError> {
    if code.len() != expected {
        return Err(CodecError::Length { expected, got: code.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CompassRose;

impl AngleEncoding for CompassRose {
    fn name(&self) -> &'static str {
        "compass_rose"
    }
    fn width(&self) -> usize {
        12
    }
    fn encode(&self, angle: f64) -> Vec<f64> {
        compass_encode(angle).to_vec()
    }
    fn decode(&self, code: &[f64]) -> Result<f64, CodecError> {
        check_len(code, 12)?;
        let mut c = CompassCode { dir_offsets: [0.0; 8], scores: [0.0; 4] };
        c.dir_offsets.copy_from_slice(&code[..8]);
        c.scores.copy_from_slice(&code[8..]);
        compass_decode(&c)
    }
}

/// Raw heading regression.
#[derive(Debug, Clone, Copy, Default)]
pub struct GtAngle;

impl AngleEncoding for GtAngle {
    fn name(&self) -> &'static str {
        "gt_angle"
    }
    fn width(&self) -> usize {
        1
    }
    fn encode(&self, angle: f64) -> Vec<f64> {
        vec![wrap_angle(angle)]
    }
    fn decode(&self, code: &[f64]) -> Result<f64, CodecError> {
        check_len(code, 1)?;
        Ok(wrap_angle(code[0]))
    }
}

/// Heading modulo π plus a binary direction bin.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectionBin;

impl AngleEncoding for DirectionBin {
    fn name(&self) -> &'static str {
        "second_style"
    }
    fn width(&self) -> usize {
        2
    }
    fn encode(&self, angle: f64) -> Vec<f64> {
        let r = wrap_angle(angle);
        let folded = if r < 0.0 { r + PI } else { r };
        vec![folded, if r < 0.0 { 1.0 } else { 0.0 }]
    }
    fn decode(&self, code: &[f64]) -> Result<f64, CodecError> {
        check_len(code, 2)?;
        let base = code[0];
        Ok(wrap_angle(if code[1] > 0.5 { base - PI } else { base }))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SinCos;

impl AngleEncoding for SinCos {
    fn name(&self) -> &'static str {
        "sin_cos"
    }
    fn width(&self) -> usize {
        2
    }
    fn encode(&self, angle: f64) -> Vec<f64> {
        let (s, c) = angle.sin_cos();
        vec![s, c]
    }
    fn decode(&self, code: &[f64]) -> Result<f64, CodecError> {
        check_len(code, 2)?;
        let norm = code[0].hypot(code[1]);
        if norm < 1e-9 {
            return Err(CodecError::Degenerate(norm));
        }
        Ok(wrap_angle(code[0].atan2(code[1])))
    }
}

/// `[dx, dy, dz, l, w, h]` plus the heading code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTargets {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub compass: CompassCode,
}

/// Offsets run from the query point to the box center.
pub fn encode_targets(b: &BBox, query: [f64; 3]) -> BoxTargets {
    BoxTargets {
        dx: b.cx - query[0],
        dy: b.cy - query[1],
        dz: b.cz - query[2],
        l: b.l,
        w: b.w,
        h: b.h,
        compass: compass_encode(b.yaw),
    }
}

/// Inverse of [`encode_targets`]. Score and timestamp are not part of the
/// targets and come back as zero.
pub fn decode_targets(t: &BoxTargets, query: [f64; 3]) -> Result<BBox, CodecError> {
    let yaw = compass_decode(&t.compass)?;
    Ok(BBox {
        cx: query[0] + t.dx,
        cy: query[1] + t.dy,
        cz: query[2] + t.dz,
        l: t.l,
        w: t.w,
        h: t.h,
        yaw,
        score: 0.0,
        t: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryLabel {
    Positive,
    Negative,
}

/// A query is positive when it falls inside (or on the edge of) any box.
pub fn classify_queries(queries: &[[f64; 2]], boxes: &[BBox]) -> Vec<QueryLabel> {
    queries
        .iter()
        .map(|q| {
            if boxes.iter().any(|b| b.contains_xy(q[0], q[1])) {
                QueryLabel::Positive
            } else {
                QueryLabel::Negative
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn assert_slice(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn compass_scores_at_reference_angles() {
        assert_slice(&compass_encode(0.0).scores, &[1.0, 0.5, 0.0, 0.5], 1e-12);
        assert_slice(&compass_encode(FRAC_PI_2).scores, &[0.5, 1.0, 0.5, 0.0], 1e-12);
        let c = compass_encode(FRAC_PI_4);
        assert_slice(&c.scores, &[0.75, 0.75, 0.25, 0.25], 1e-12);
        let h = 2f64.sqrt() / 2.0;
        assert_slice(&c.dir_offsets[..4], &[h - 1.0, h, h + 1.0, h], 1e-12);
        assert_slice(&c.dir_offsets[4..], &[h, h - 1.0, h, h + 1.0], 1e-12);
    }

    #[test]
    fn compass_round_trip_examples() {
        assert!(compass_decode(&compass_encode(0.0)).unwrap().abs() < 1e-12);
        assert!((compass_decode(&compass_encode(FRAC_PI_4)).unwrap() - FRAC_PI_4).abs() < 1e-9);
        let max_err = (0..10_000)
            .map(|i| -PI + 2.0 * PI * (i as f64 + 0.5) / 10_000.0)
            .map(|a| crate::geometry::angle_diff(compass_decode(&compass_encode(a)).unwrap(), a).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9);
    }

    #[test]
    fn degenerate_code_is_an_error() {
        let mut c = compass_encode(0.3);
        let a = c.best_anchor();
        let (sa, ca) = ANCHORS[a].sin_cos();
        c.dir_offsets[a] = -ca;
        c.dir_offsets[4 + a] = -sa;
        assert!(matches!(compass_decode(&c), Err(CodecError::Degenerate(_))));
    }

    #[test]
    fn target_examples() {
        let b = BBox::new([5.0, 1.0, 0.5], [4.0, 2.0, 1.5], 0.2);
        let t = encode_targets(&b, b.center());
        assert_eq!((t.dx, t.dy, t.dz), (0.0, 0.0, 0.0));
        let t = encode_targets(&b, [4.0, 0.0, 0.0]);
        assert_eq!((t.dx, t.dy, t.dz), (1.0, 1.0, 0.5));
    }

    #[test]
    fn classification_examples() {
        let b = BBox::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
        let labels = classify_queries(&[[0.0, 0.0], [100.0, 0.0], [2.0, 0.5]], &[b]);
        assert_eq!(labels, vec![QueryLabel::Positive, QueryLabel::Negative, QueryLabel::Positive]);
    }

    #[test]
    fn alternative_encodings_round_trip() {
        let codecs: [&dyn AngleEncoding; 4] = [&CompassRose, &GtAngle, &DirectionBin, &SinCos];
        for codec in codecs {
            for i in 0..360 {
                let a = wrap_angle((i as f64).to_radians() - PI + 0.001);
                let code = codec.encode(a);
                assert_eq!(code.len(), codec.width());
                let back = codec.decode(&code).unwrap();
                assert!(crate::geometry::angle_diff(back, a).abs() < 1e-9, "{} at {a}", codec.name());
            }
            assert!(codec.decode(&[0.0; 13]).is_err());
        }
    }

    proptest! {
        #[test]
        fn scores_sum_to_two(a in -PI..PI) {
            let s: f64 = compass_encode(a).scores.iter().sum();
            prop_assert!((s - 2.0).abs() < 1e-12);
        }

        #[test]
        fn winning_anchor_is_within_a_quarter_turn(a in -10.0..10.0f64) {
            let c = compass_encode(a);
            let d = crate::geometry::angle_diff(ANCHORS[c.best_anchor()], a).abs();
            prop_assert!(d <= FRAC_PI_4 + 1e-9);
            let (hi, lo) = c.scores.iter().fold((f64::MIN, f64::MAX), |(h, l), &s| (h.max(s), l.min(s)));
            prop_assert!(hi >= 0.75 - 1e-12 && lo <= 0.25 + 1e-12);
        }

        #[test]
        fn code_is_continuous(a in -PI..PI, d in -1e-4..1e-4f64) {
            let (c1, c2) = (compass_encode(a).to_vec(), compass_encode(a + d).to_vec());
            let dist = c1.iter().zip(&c2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            // cos/sin offsets are 1-Lipschitz and scores 1/π-Lipschitz
            prop_assert!(dist <= 3.0 * d.abs() + 1e-12);
        }

        #[test]
        fn targets_round_trip(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -2.0..2.0f64, yaw in -PI..PI,
                              qx in -50.0..50.0f64, qy in -50.0..50.0f64, qz in -2.0..2.0f64) {
            let b = BBox::new([x, y, z], [4.2, 1.8, 1.6], yaw);
            let q = [qx, qy, qz];
            let back = decode_targets(&encode_targets(&b, q), q).unwrap();
            prop_assert!((back.cx - b.cx).abs() < 1e-9 && (back.cy - b.cy).abs() < 1e-9 && (back.cz - b.cz).abs() < 1e-9);
            prop_assert!(crate::geometry::angle_diff(back.yaw, b.yaw).abs() < 1e-9);
            prop_assert_eq!((back.l, back.w, back.h), (b.l, b.w, b.h));
        }
    }
}
