//! Memory of historical object queries and prediction to a target time.
//!
//! Each agent keeps the best queries of its last few frames. A current query
//! is associated backwards through that memory (by track id, or by nearest
//! neighbour inside a gate), a constant velocity is fitted to the associated
//! positions by least squares, and the query is extrapolated to the global
//! target timestamp. Fitted on the queries' own timestamps, this is also
//! what compensates rolling-shutter and communication delay.

use crate::geometry::BBox;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

pub const DEFAULT_MEMORY_FRAMES: usize = 4;
pub const DEFAULT_MEMORY_TOP_K: usize = 256;
pub const DEFAULT_GATE_RADIUS: f64 = 3.0;
pub const DEFAULT_FEATURE_WIDTH: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("frame timestamp {t} is not after the newest stored frame {newest}")]
    NonMonotonic { t: f64, newest: f64 },
    #[error("target time {target} precedes the newest stored frame {newest}")]
    TargetInPast { target: f64, newest: f64 },
    #[error("receive time {t_now} precedes send time {t_send}")]
    NegativeLatency { t_send: f64, t_now: f64 },
}

/// An object query: feature vector plus BEV position, score and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub feature: Vec<f32>,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub t: f64,
    /// Not transmitted in CPMs.
    #[serde(default)]
    pub track_id: Option<u32>,
}

impl Query {
    pub fn new(x: f64, y: f64, score: f64, t: f64, feature: Vec<f32>) -> Self {
        Self { feature, x, y, score, t, track_id: None }
    }

    pub fn with_track(mut self, id: u32) -> Self {
        self.track_id = Some(id);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFrame {
    pub t: f64,
    pub queries: Vec<Query>,
}

/// Ring buffer of the top-scoring queries of the most recent frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    frames: VecDeque<MemoryFrame>,
    capacity: usize,
    top_k: usize,
    gate_radius: f64,
}

impl Default for MemoryQueue {
    fn default() -> Self {
        Self::new(DEFAULT_MEMORY_FRAMES, DEFAULT_MEMORY_TOP_K)
    }
}

impl MemoryQueue {
    pub fn new(capacity: usize, top_k: usize) -> Self {
        Self { frames: VecDeque::with_capacity(capacity + 1), capacity: capacity.max(1), top_k, gate_radius: DEFAULT_GATE_RADIUS }
    }

    pub fn with_gate_radius(mut self, r: f64) -> Self {
        self.gate_radius = r;
        self
    }

    pub fn frames(&self) -> impl DoubleEndedIterator<Item = &MemoryFrame> {
        self.frames.iter()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn newest_time(&self) -> Option<f64> {
        self.frames.back().map(|f| f.t)
    }

    pub fn total_queries(&self) -> usize {
        self.frames.iter().map(|f| f.queries.len()).sum()
    }

    /// Stores the `top_k` best queries of a new frame, evicting the oldest
    /// frame beyond capacity. Ties in score keep the lower track id, then
    /// the earlier input position.
    pub fn push(&mut self, queries: &[Query], t: f64) -> Result<(), TemporalError> {
        if let Some(newest) = self.newest_time() {
            if !(t > newest) {
                return Err(TemporalError::NonMonotonic { t, newest });
            }
        }
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by(|&a, &b| {
            let (qa, qb) = (&queries[a], &queries[b]);
            qb.score
                .total_cmp(&qa.score)
                .then(qa.track_id.unwrap_or(u32::MAX).cmp(&qb.track_id.unwrap_or(u32::MAX)))
                .then(a.cmp(&b))
        });
        let kept = order.into_iter().take(self.top_k).map(|i| queries[i].clone()).collect();
        self.frames.push_back(MemoryFrame { t, queries: kept });
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Positions `(t, x, y)` of `q` in memory frames older than `q.t`,
    /// newest first, followed back as far as the association holds.
    pub fn history(&self, q: &Query) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let (mut x, mut y) = (q.x, q.y);
        for frame in self.frames.iter().rev().filter(|f| f.t < q.t) {
            let found = match q.track_id {
                Some(id) => frame.queries.iter().find(|h| h.track_id == Some(id)),
                None => nearest_within(&frame.queries, x, y, self.gate_radius),
            };
            let Some(h) = found else { break };
            out.push((h.t, h.x, h.y));
            x = h.x;
            y = h.y;
        }
        out
    }

    /// Least-squares velocity over the query and its history, if the history
    /// spans any time.
    pub fn velocity(&self, q: &Query) -> Option<[f64; 2]> {
        let mut samples = self.history(q);
        samples.push((q.t, q.x, q.y));
        fit_velocity(&samples)
    }
}

/// Functional form of [`MemoryQueue::push`].
pub fn memory_push(mut mq: MemoryQueue, queries: &[Query], t: f64) -> Result<MemoryQueue, TemporalError> {
    mq.push(queries, t)?;
    Ok(mq)
}

fn nearest_within(queries: &[Query], x: f64, y: f64, radius: f64) -> Option<&Query> {
    let mut best: Option<(f64, &Query)> = None;
    for h in queries {
        let d = (h.x - x).hypot(h.y - y);
        if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, h));
        }
    }
    best.map(|(_, h)| h)
}

/// Slope of the least-squares line through `(t, x)` and `(t, y)`.
pub fn fit_velocity(samples: &[(f64, f64, f64)]) -> Option<[f64; 2]> {
    if samples.len() < 2 {
        return None;
    }
    let n = samples.len() as f64;
    let (tm, xm, ym) = samples.iter().fold((0.0, 0.0, 0.0), |a, s| (a.0 + s.0 / n, a.1 + s.1 / n, a.2 + s.2 / n));
    let (mut stt, mut stx, mut sty) = (0.0, 0.0, 0.0);
    for &(t, x, y) in samples {
        let dt = t - tm;
        stt += dt * dt;
        stx += dt * (x - xm);
        sty += dt * (y - ym);
    }
    (stt > 1e-12).then(|| [stx / stt, sty / stt])
}

/// Moves every query to `t_target` along its fitted velocity.
///
/// Queries without usable history keep their position. Every output
/// timestamp is `t_target`.
pub fn predict_at_time(mq: &MemoryQueue, current: &[Query], t_target: f64) -> Result<Vec<Query>, TemporalError> {
    if let Some(newest) = mq.newest_time() {
        if t_target < newest {
            return Err(TemporalError::TargetInPast { target: t_target, newest });
        }
    }
    Ok(current
        .iter()
        .map(|q| {
            let mut out = q.clone();
            if let Some([vx, vy]) = mq.velocity(q) {
                out.x += vx * (t_target - q.t);
                out.y += vy * (t_target - q.t);
            }
            out.t = t_target;
            out
        })
        .collect())
}

/// Advances a received message's queries and boxes from their own
/// timestamps to `t_now`.
///
/// Each box moves with the velocity of the nearest query inside the gate;
/// boxes with no such query stay where they are.
pub fn compensate_latency(
    queries: &[Query],
    boxes: &[BBox],
    t_send: f64,
    t_now: f64,
    mq: &MemoryQueue,
) -> Result<(Vec<Query>, Vec<BBox>), TemporalError> {
    if t_now < t_send {
        return Err(TemporalError::NegativeLatency { t_send, t_now });
    }
    let velocities: Vec<Option<[f64; 2]>> = queries.iter().map(|q| mq.velocity(q)).collect();
    let moved_queries = queries
        .iter()
        .zip(&velocities)
        .map(|(q, v)| {
            let mut out = q.clone();
            if let Some([vx, vy]) = v {
                out.x += vx * (t_now - q.t);
                out.y += vy * (t_now - q.t);
            }
            out.t = t_now;
            out
        })
        .collect();
    let moved_boxes = boxes
        .iter()
        .map(|b| {
            let mut out = *b;
            let nearest = queries
                .iter()
                .zip(&velocities)
                .map(|(q, v)| ((q.x - b.cx).hypot(q.y - b.cy), v))
                .filter(|(d, _)| *d <= mq.gate_radius)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, Some([vx, vy]))) = nearest {
                out.cx += vx * (t_now - b.t);
                out.cy += vy * (t_now - b.t);
            }
            out.t = t_now;
            out
        })
        .collect();
    Ok((moved_queries, moved_boxes))
}
