//! Localization noise and message delivery with latency.

use crate::cpm::Cpm;
use crate::geometry::Pose;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Pose noise `N(0,1)·ε` in meters for x and y and in degrees for yaw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    pub epsilon: f64,
}

/// Draws x, y, then yaw noise, always consuming three normals so that the
/// draw sequence does not depend on `epsilon`.
pub fn inject_pose_noise<R: Rng + ?Sized>(p: &Pose, em: &ErrorModel, rng: &mut R) -> Pose {
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let nr: f64 = rng.sample(StandardNormal);
    if em.epsilon == 0.0 {
        return *p;
    }
    Pose::new(p.x + nx * em.epsilon, p.y + ny * em.epsilon, p.z, p.yaw + (nr * em.epsilon).to_radians())
}

/// Uniform latency in `[min_ms, max_ms]`; equal bounds give a fixed delay.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySpec {
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencySpec {
    pub fn fixed(ms: f64) -> Self {
        Self { min_ms: ms, max_ms: ms }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_ms >= 0.0) || !(self.max_ms >= self.min_ms) {
            return Err(format!("need 0 <= min_ms <= max_ms, got [{}, {}]", self.min_ms, self.max_ms));
        }
        Ok(())
    }

    /// Latency in seconds. One uniform draw is consumed either way.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        (self.min_ms + u * (self.max_ms - self.min_ms)) * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub cpm: Cpm,
    pub t_send: f64,
    pub t_deliver: f64,
    seq: u64,
}

/// Pending messages ordered by delivery time, then by send order.
#[derive(Debug, Clone, Default)]
pub struct DeliveryQueue {
    pending: Vec<Delivery>,
    next_seq: u64,
}

/// Slack when comparing delivery and frame times.
pub const DELIVERY_TOLERANCE: f64 = 1e-9;

impl DeliveryQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Schedules `cpm`, sent at `t_send`, for delivery `latency` seconds later.
    /// Negative latency is clamped to zero. Returns the delivery time.
    pub fn deliver_with_latency(&mut self, cpm: Cpm, t_send: f64, latency: f64) -> f64 {
        let t_deliver = t_send + latency.max(0.0);
        let seq = self.next_seq;
        self.next_seq += 1;
        let at = self.pending.partition_point(|d| (d.t_deliver, d.seq) <= (t_deliver, seq));
        self.pending.insert(at, Delivery { cpm, t_send, t_deliver, seq });
        t_deliver
    }

    /// Removes and returns every message due by `t_now`.
    pub fn pop_ready(&mut self, t_now: f64) -> Vec<Delivery> {
        let n = self.pending.partition_point(|d| d.t_deliver <= t_now + DELIVERY_TOLERANCE);
        self.pending.drain(..n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_epsilon_is_identity() {
        let p = Pose::new(1.0, -2.0, 1.9, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_pose_noise(&p, &ErrorModel { epsilon: 0.0 }, &mut rng), p);
    }

    #[test]
    fn noise_is_seeded() {
        let p = Pose::identity();
        let em = ErrorModel { epsilon: 0.4 };
        let a = inject_pose_noise(&p, &em, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_pose_noise(&p, &em, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn noise_scale_matches_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let em = ErrorModel { epsilon: 1.0 };
        let n = 100_000;
        let (mut sx, mut sxx, mut syaw) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let q = inject_pose_noise(&Pose::identity(), &em, &mut rng);
            sx += q.x;
            sxx += q.x * q.x;
            syaw += q.yaw.to_degrees().powi(2);
        }
        let mean = sx / n as f64;
        let std = (sxx / n as f64 - mean * mean).sqrt();
        assert!((0.99..=1.01).contains(&std), "x std {std}");
        let yaw_std = (syaw / n as f64).sqrt();
        assert!((0.99..=1.01).contains(&yaw_std), "yaw std {yaw_std} deg");
    }

    #[test]
    fn delivery_examples() {
        let mut q = DeliveryQueue::new();
        let c = Cpm::new(1, Pose::identity(), 0.0);
        q.deliver_with_latency(c.clone(), 0.0, 0.0);
        assert_eq!(q.pop_ready(0.0).len(), 1);

        q.deliver_with_latency(c.clone(), 0.1, 0.2);
        assert!(q.pop_ready(0.1).is_empty());
        assert!(q.pop_ready(0.2).is_empty());
        // 0.1 + 0.2 is not exactly 0.3 in binary
        assert_eq!(q.pop_ready(0.3).len(), 1);
    }

    #[test]
    fn delivery_order_is_by_time_then_send_order() {
        let mut q = DeliveryQueue::new();
        for (id, t, lat) in [(1, 0.0, 0.3), (2, 0.1, 0.1), (3, 0.1, 0.1), (4, 0.2, 0.0)] {
            q.deliver_with_latency(Cpm::new(id, Pose::identity(), t), t, lat);
        }
        let ids: Vec<u32> = q.pop_ready(1.0).iter().map(|d| d.cpm.agent_id).collect();
        assert_eq!(ids, vec![2, 3, 4, 1]);
    }

    #[test]
    fn seeded_latencies_reproduce() {
        let spec = LatencySpec { min_ms: 0.0, max_ms: 200.0 };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| spec.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert!(draw(5).iter().all(|l| (0.0..=0.2).contains(l)));
        assert_eq!(LatencySpec::fixed(100.0).sample(&mut ChaCha8Rng::seed_from_u64(0)), 0.1);
    }
}
