//! Closed-form planar rigid fit between corresponding box sets.

use super::AlignError;
use crate::geometry::{wrap_angle, BBox, Pose};

/// Pose mapping the second box of each pair onto the first.
///
/// Two or more pairs use the 2D Kabsch solution on centered box centers
/// (translation from the centroids). A single pair, or pairs whose centers
/// all coincide, take the rotation from the mean heading difference.
pub fn estimate_se2(pairs: &[(BBox, BBox)]) -> Result<Pose, AlignError> {
    if pairs.is_empty() {
        return Err(AlignError::NoPairs);
    }
    let n = pairs.len() as f64;
    let (mut ax, mut ay, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in pairs {
        ax += a.cx;
        ay += a.cy;
        bx += b.cx;
        by += b.cy;
    }
    let (ax, ay, bx, by) = (ax / n, ay / n, bx / n, by / n);
    let (mut dot, mut cross, mut spread) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        let (pa, pb) = ((a.cx - ax, a.cy - ay), (b.cx - bx, b.cy - by));
        dot += pb.0 * pa.0 + pb.1 * pa.1;
        cross += pb.0 * pa.1 - pb.1 * pa.0;
        spread += pb.0 * pb.0 + pb.1 * pb.1;
    }
    let yaw = if pairs.len() >= 2 && spread > 1e-12 && dot.hypot(cross) > 1e-12 {
        cross.atan2(dot)
    } else {
        mean_heading_difference(pairs)
    };
    let (s, c) = yaw.sin_cos();
    Ok(Pose::planar(ax - (c * bx - s * by), ay - (s * bx + c * by), yaw))
}

fn mean_heading_difference(pairs: &[(BBox, BBox)]) -> f64 {
    let (s, c) = pairs.iter().fold((0.0, 0.0), |(s, c), (a, b)| {
        let d = a.yaw - b.yaw;
        (s + d.sin(), c + d.cos())
    });
    wrap_angle(s.atan2(c))
}

/// Center residual of each pair under `pose`.
pub fn pair_residuals(pairs: &[(BBox, BBox)], pose: &Pose) -> Vec<f64> {
    pairs
        .iter()
        .map(|(a, b)| {
            let (x, y) = pose.apply_xy(b.cx, b.cy);
            (a.cx - x).hypot(a.cy - y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn layout() -> Vec<BBox> {
        (0..10)
            .map(|i| {
                let a = i as f64 * 0.7;
                BBox::new([30.0 * a.cos() + i as f64, 20.0 * a.sin(), 0.8], [4.5, 1.9, 1.6], a)
            })
            .collect()
    }

    #[test]
    fn identity_for_identical_sets() {
        let boxes = layout();
        let pairs: Vec<_> = boxes.iter().map(|b| (*b, *b)).collect();
        assert!(estimate_se2(&pairs).unwrap().max_abs_diff(&Pose::identity()) < 1e-12);
        assert_eq!(estimate_se2(&[]).unwrap_err(), AlignError::NoPairs);
    }

    #[test]
    fn recovers_exact_rigid_motion() {
        let truth = Pose::planar(1.0, 2.0, 30f64.to_radians());
        let a = layout();
        // b expressed so that truth maps b onto a
        let inv = truth.inverse();
        let pairs: Vec<_> = a.iter().map(|x| (*x, x.transformed(&inv))).collect();
        assert!(estimate_se2(&pairs).unwrap().max_abs_diff(&truth) < 1e-9);
    }

    #[test]
    fn single_pair_uses_heading() {
        let truth = Pose::planar(-3.0, 4.0, 0.4);
        let a = BBox::new([5.0, 5.0, 0.0], [4.0, 2.0, 1.5], 0.9);
        let pairs = [(a, a.transformed(&truth.inverse()))];
        assert!(estimate_se2(&pairs).unwrap().max_abs_diff(&truth) < 1e-12);
    }

    #[test]
    fn coincident_centers_fall_back_to_heading() {
        let a = BBox::new([1.0, 1.0, 0.0], [4.0, 2.0, 1.5], 0.5);
        let b = BBox::new([1.0, 1.0, 0.0], [4.0, 2.0, 1.5], 0.2);
        let p = estimate_se2(&[(a, b), (a, b)]).unwrap();
        assert!((p.yaw - 0.3).abs() < 1e-12);
    }

    #[test]
    fn noisy_fit_translation_error_is_small() {
        let truth = Pose::planar(1.0, 2.0, 30f64.to_radians());
        let inv = truth.inverse();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut errors: Vec<f64> = (0..100u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pairs: Vec<_> = layout()
                    .iter()
                    .map(|x| {
                        let mut b = x.transformed(&inv);
                        b.cx += noise.sample(&mut rng);
                        b.cy += noise.sample(&mut rng);
                        (*x, b)
                    })
                    .collect();
                let est = estimate_se2(&pairs).unwrap();
                (est.x - truth.x).hypot(est.y - truth.y)
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        assert!(errors[50] < 0.05, "median {}", errors[50]);
    }
}
