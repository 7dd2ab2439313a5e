//! Planar pose-graph refinement (Gauss–Newton with Levenberg damping).
//!
//! Each edge `(i, j, z, w)` contributes `w·‖e‖²` with
//! `e = [R_iᵀ(t_j − t_i) − z_xy ; wrap(θ_j − θ_i − z_θ)]`.
//! Node 0 is held fixed to remove the gauge freedom; `z` of every pose is
//! carried through untouched.

use super::AlignError;
use crate::geometry::{wrap_angle, Pose};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-9;
const MAX_DAMPING_ESCALATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    /// Pose of `to` expressed in the frame of `from`.
    pub measurement: Pose,
    pub weight: f64,
}

impl PoseEdge {
    pub fn new(from: usize, to: usize, measurement: Pose, weight: f64) -> Self {
        Self { from, to, measurement, weight }
    }

    pub fn residual(&self, poses: &[Pose]) -> [f64; 3] {
        let (a, b) = (&poses[self.from], &poses[self.to]);
        let (s, c) = a.yaw.sin_cos();
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        [
            c * dx + s * dy - self.measurement.x,
            -s * dx + c * dy - self.measurement.y,
            wrap_angle(b.yaw - a.yaw - self.measurement.yaw),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub poses: Vec<Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Total weighted squared residual.
pub fn graph_cost(poses: &[Pose], edges: &[PoseEdge]) -> f64 {
    edges
        .iter()
        .map(|e| e.weight * e.residual(poses).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

pub fn pose_graph_optimize(poses: &[Pose], edges: &[PoseEdge]) -> Result<Vec<Pose>, AlignError> {
    optimize_graph(poses, edges).map(|r| r.poses)
}

pub fn optimize_graph(poses: &[Pose], edges: &[PoseEdge]) -> Result<GraphReport, AlignError> {
    validate(poses, edges)?;
    let mut cur = poses.to_vec();
    let initial_cost = graph_cost(&cur, edges);
    let free = poses.len() - 1;
    if free == 0 {
        return Ok(GraphReport { poses: cur, initial_cost, final_cost: initial_cost, iterations: 0 });
    }
    let mut cost = initial_cost;
    let mut lambda = 0.0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, b) = normal_equations(&cur, edges);
        let mut accepted = None;
        for escalation in 0..=MAX_DAMPING_ESCALATIONS {
            let mut damped = h.clone();
            for k in 0..3 * free {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&b)),
                None => {
                    if escalation == MAX_DAMPING_ESCALATIONS {
                        return Err(AlignError::SingularGraph);
                    }
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                    continue;
                }
            };
            let candidate = apply_step(&cur, &step);
            let new_cost = graph_cost(&candidate, edges);
            if new_cost <= cost {
                accepted = Some((candidate, new_cost, step.norm()));
                break;
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        let Some((candidate, new_cost, step_norm)) = accepted else { break };
        cur = candidate;
        cost = new_cost;
        lambda /= 10.0;
        if lambda < 1e-12 {
            lambda = 0.0;
        }
        if step_norm < STEP_TOLERANCE {
            break;
        }
    }
    Ok(GraphReport { poses: cur, initial_cost, final_cost: cost, iterations })
}

fn validate(poses: &[Pose], edges: &[PoseEdge]) -> Result<(), AlignError> {
    if poses.is_empty() {
        return Err(AlignError::EmptyGraph);
    }
    let mut parent: Vec<usize> = (0..poses.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for e in edges {
        if e.from >= poses.len() || e.to >= poses.len() || e.from == e.to {
            return Err(AlignError::BadEdge(e.from, e.to));
        }
        if !(e.weight > 0.0) {
            return Err(AlignError::BadEdge(e.from, e.to));
        }
        let (a, b) = (root(&mut parent, e.from), root(&mut parent, e.to));
        parent[a] = b;
    }
    let r0 = root(&mut parent, 0);
    if (1..poses.len()).any(|i| root(&mut parent, i) != r0) {
        return Err(AlignError::Disconnected);
    }
    Ok(())
}

// variables of node k ≥ 1 live at 3(k-1)..3k
fn normal_equations(poses: &[Pose], edges: &[PoseEdge]) -> (DMatrix<f64>, DVector<f64>) {
    let dim = 3 * (poses.len() - 1);
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for e in edges {
        let (a, p) = (&poses[e.from], &poses[e.to]);
        let (s, c) = a.yaw.sin_cos();
        let (dx, dy) = (p.x - a.x, p.y - a.y);
        // Jacobian blocks w.r.t. (x, y, θ) of `from` and `to`
        let ja = [[-c, -s, -s * dx + c * dy], [s, -c, -c * dx - s * dy], [0.0, 0.0, -1.0]];
        let jb = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let r = e.residual(poses);
        let blocks = [(e.from, ja), (e.to, jb)];
        for &(ni, ji) in &blocks {
            if ni == 0 {
                continue;
            }
            let oi = 3 * (ni - 1);
            for u in 0..3 {
                b[oi + u] += e.weight * (0..3).map(|k| ji[k][u] * r[k]).sum::<f64>();
            }
            for &(nj, jj) in &blocks {
                if nj == 0 {
                    continue;
                }
                let oj = 3 * (nj - 1);
                for u in 0..3 {
                    for v in 0..3 {
                        h[(oi + u, oj + v)] += e.weight * (0..3).map(|k| ji[k][u] * jj[k][v]).sum::<f64>();
                    }
                }
            }
        }
    }
    (h, b)
}

fn apply_step(poses: &[Pose], step: &DVector<f64>) -> Vec<Pose> {
    let mut out = poses.to_vec();
    for (k, p) in out.iter_mut().enumerate().skip(1) {
        let o = 3 * (k - 1);
        *p = Pose::new(p.x + step[o], p.y + step[o + 1], p.z, p.yaw + step[o + 2]);
    }
    out
}
