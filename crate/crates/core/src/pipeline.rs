//! End-to-end cooperative detection experiments on simulated scenarios.
//!
//! Scans, detections and queries do not depend on localization noise,
//! latency or the alignment variant, so they are recorded once per scenario
//! ([`record`]). Each sweep point and experiment then replays the message
//! exchange over the recording ([`evaluate_point`]):
//!
//! 1. every agent predicts its boxes and queries to the frame timestamp from
//!    its own query memory,
//! 2. cooperative agents broadcast a score-filtered CPM with a noisy pose,
//!    delivered after a sampled latency,
//! 3. the ego compensates each received message for its age, corrects the
//!    relative pose from the shared boxes, fuses queries on its grid and
//!    boxes by suppression, and is scored against time-aligned ground truth.

use crate::augment::{fsa_augment, DEFAULT_FSA_SPACING};
use crate::cpm::{decode_cpm, encode_cpm, select_by_score, Cpm};
use crate::eval::{average_precision, median, pose_error, EvalFrame, MetricRow, Sorting};
use crate::geometry::{bev_iou, relative_pose, BBox, Pose, TimedPointCloud};
use crate::pose_align::{align_agent, align_fleet, AlignConfig};
use crate::sim::detect::canonical_heading;
use crate::sim::{
    deskew, detect_boxes, ground_truth_at, inject_pose_noise, lidar_scan_labeled, select_queries, ConfigError,
    DeliveryQueue, DetectorConfig, ErrorModel, LatencySpec, QueryConfig, ScenarioConfig, Scene,
};
use crate::sparse::{voxelize, BackboneSchedule, StageReport, DEFAULT_VOXEL_SIZE};
use crate::spatial::{adapt_rotation, knn_fuse, snap_to_grid, DEFAULT_FUSION_K, DEFAULT_GRID_RES};
use crate::temporal::{compensate_latency, MemoryQueue, Query, DEFAULT_GATE_RADIUS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid option `{option}`: {reason}")]
    Option { option: String, reason: String },
    #[error("{0}")]
    Runtime(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Option { .. } => 2,
            PipelineError::Runtime(_) | PipelineError::Io { .. } => 3,
        }
    }
}

fn runtime(e: impl fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}

fn option_err(option: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Option { option: option.into(), reason: reason.into() }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Pose, temporal and spatial alignment.
    Full,
    /// Relative poses taken from the (noisy) broadcast poses.
    NoPam,
    /// No prediction to the frame timestamp and no latency compensation.
    NoTam,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::Full, Experiment::NoPam, Experiment::NoTam];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Full => "full",
            Experiment::NoPam => "no_pam",
            Experiment::NoTam => "no_tam",
        }
    }

    fn uses_pam(self) -> bool {
        self != Experiment::NoPam
    }

    fn uses_tam(self) -> bool {
        self != Experiment::NoTam
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    LatencyMs,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::LatencyMs => "latency_ms",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "latency_ms" | "latency-ms" | "latency" => Ok(SweepAxis::LatencyMs),
            _ => Err(option_err("--sweep", format!("unknown axis `{s}` (expected epsilon or latency_ms)"))),
        }
    }
}

/// A value `v` or an inclusive range `a:b:step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValueSpec {
    Single(f64),
    Range(Vec<f64>),
}

impl ValueSpec {
    pub fn parse(option: &str, text: &str) -> Result<Self, PipelineError> {
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| option_err(option, format!("`{s}` is not a number")));
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            [v] => Ok(ValueSpec::Single(num(v)?)),
            [a, b, step] => Ok(ValueSpec::Range(parse_range(option, num(a)?, num(b)?, num(step)?)?)),
            _ => Err(option_err(option, "expected `v` or `a:b:step`")),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            ValueSpec::Single(v) => vec![*v],
            ValueSpec::Range(v) => v.clone(),
        }
    }
}

/// Inclusive `a, a+step, …, b`, snapped to 1e-9 so that printed values
/// are exact decimals.
pub fn parse_range(option: &str, a: f64, b: f64, step: f64) -> Result<Vec<f64>, PipelineError> {
    if !(step > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(option_err(option, "need a <= b and step > 0"));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    if n > 10_000 {
        return Err(option_err(option, "more than 10000 sweep points"));
    }
    Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// Command-line overrides of a scenario file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub epsilon: Option<ValueSpec>,
    pub latency_ms: Option<ValueSpec>,
    /// `axis=a:b:step`.
    pub sweep: Option<(SweepAxis, Vec<f64>)>,
    pub cpm_threshold: Option<f64>,
    pub sorting: Option<Sorting>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn parse_sweep(text: &str) -> Result<(SweepAxis, Vec<f64>), PipelineError> {
        let (axis, range) = text.split_once('=').ok_or_else(|| option_err("--sweep", "expected `axis=a:b:step`"))?;
        let axis: SweepAxis = axis.trim().parse()?;
        match ValueSpec::parse("--sweep", range)? {
            ValueSpec::Range(v) => Ok((axis, v)),
            ValueSpec::Single(v) => Ok((axis, vec![v])),
        }
    }
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub config: ScenarioConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl ResolvedRun {
    pub fn resolve(mut config: ScenarioConfig, ov: &Overrides) -> Result<Self, PipelineError> {
        if let Some(seed) = ov.seed {
            config.seed = seed;
        }
        if let Some(t) = ov.cpm_threshold {
            config.run.cpm_threshold = t;
        }
        if let Some(s) = ov.sorting {
            config.run.sorting = s;
        }
        let mut sweep: Option<(SweepAxis, Vec<f64>)> = ov.sweep.clone();
        for (axis, spec) in [(SweepAxis::Epsilon, &ov.epsilon), (SweepAxis::LatencyMs, &ov.latency_ms)] {
            match spec {
                Some(ValueSpec::Single(v)) => match axis {
                    SweepAxis::Epsilon => config.error_model.epsilon = *v,
                    SweepAxis::LatencyMs => config.latency = LatencySpec::fixed(*v),
                },
                Some(ValueSpec::Range(vs)) => {
                    if sweep.is_some() {
                        return Err(option_err("--sweep", "only one swept quantity per run"));
                    }
                    sweep = Some((axis, vs.clone()));
                }
                None => {}
            }
        }
        config.validate()?;
        let (axis, values) = sweep.unwrap_or((SweepAxis::Epsilon, vec![config.error_model.epsilon]));
        for &v in &values {
            let ok = match axis {
                SweepAxis::Epsilon => (0.0..=1.0).contains(&v),
                SweepAxis::LatencyMs => v >= 0.0,
            };
            if !ok {
                return Err(option_err(axis.name(), format!("value {v} out of range")));
            }
        }
        Ok(Self { config, axis, values })
    }

    pub fn point(&self, value: f64) -> (ErrorModel, LatencySpec) {
        match self.axis {
            SweepAxis::Epsilon => (ErrorModel { epsilon: value }, self.config.latency),
            SweepAxis::LatencyMs => (self.config.error_model, LatencySpec::fixed(value)),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("resolved runs serialize");
        hex::encode(Sha256::digest(&json))
    }
}

/// What one agent perceived in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    pub t_start: f64,
    /// True sensor pose at `t_start`.
    pub pose: Pose,
    /// Sensor frame at `t_start`.
    pub boxes: Vec<BBox>,
    pub queries: Vec<Query>,
    /// LiDAR returns per actor.
    pub hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub scene: Scene,
    /// Frame boundary timestamps `t_g`.
    pub times: Vec<f64>,
    /// `frames[k][a]`.
    pub frames: Vec<Vec<AgentFrame>>,
}

/// Per-agent sweep preprocessing: free-space augmentation, deskew into the
/// sweep-start frame, crop.
pub fn preprocess(scene: &Scene, a: usize, raw: &TimedPointCloud, t_start: f64) -> Result<TimedPointCloud, PipelineError> {
    let augmented = fsa_augment(raw, &scene.lidar, DEFAULT_FSA_SPACING).map_err(runtime)?;
    let mut pc = deskew(&augmented, |t| scene.agent_pose(a, t), t_start);
    let range = scene.config.range;
    pc.points.retain(|p| range.contains(p.x, p.y));
    Ok(pc)
}

pub fn frame_times(config: &ScenarioConfig) -> Vec<f64> {
    (1..=config.frame_count()).map(|k| k as f64 * config.frame_period).collect()
}

/// Scans, detections and queries of every agent in every frame.
pub fn record(scene: &Scene) -> Result<Recording, PipelineError> {
    let times = frame_times(&scene.config);
    let det_cfg = DetectorConfig::default();
    let q_cfg = QueryConfig {
        max_queries: scene.config.run.max_queries,
        feature_width: scene.config.run.feature_width,
        ..QueryConfig::default()
    };
    let jobs: Vec<(usize, usize)> = (0..times.len()).flat_map(|k| (0..scene.agents.len()).map(move |a| (k, a))).collect();
    let results: Result<Vec<AgentFrame>, PipelineError> = jobs
        .par_iter()
        .map(|&(k, a)| {
            let t_start = scene.sweep_start(a, times[k]);
            let scan = lidar_scan_labeled(scene, a, t_start);
            let pc = preprocess(scene, a, &scan.cloud, t_start)?;
            let boxes = detect_boxes(&pc, scene.lidar.height, &det_cfg);
            let queries = select_queries(&pc, &boxes, scene.lidar.height, &q_cfg);
            Ok(AgentFrame {
                t_start,
                pose: scene.agent_pose(a, t_start),
                boxes,
                queries,
                hits: scan.hits_per_actor(scene.actors.len()),
            })
        })
        .collect();
    let mut flat = results?.into_iter();
    let frames = times.iter().map(|_| (0..scene.agents.len()).map(|_| flat.next().expect("one result per job")).collect()).collect();
    Ok(Recording { scene: scene.clone(), times, frames })
}

/// One row of `cpm_sizes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmSizeRow {
    pub frame: usize,
    pub agent: u32,
    pub t: f64,
    pub threshold: f64,
    pub n_queries: usize,
    pub n_boxes: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub frames: Vec<EvalFrame>,
    /// Translation (m) and rotation (deg) error of every relative pose used.
    pub pose_errors: Vec<(f64, f64)>,
    pub cpm_sizes: Vec<CpmSizeRow>,
    pub fused_nodes: Vec<usize>,
    /// First CPM sent by each cooperative agent, encoded.
    pub first_cpms: BTreeMap<u32, Vec<u8>>,
}

const NOISE_STREAM: u64 = 0x6e6f_6973_65;
const LATENCY_STREAM: u64 = 0x6c61_7465_6e63_79;
/// Frames needed to fill the query memory before scoring.
pub const WARMUP_FRAMES: usize = 3;
/// Messages older than this are not fused (s).
pub const MAX_MESSAGE_AGE: f64 = 0.5;
/// Boxes overlapping a higher-scoring box by more than this are merged.
pub const FUSION_NMS_IOU: f64 = 0.15;

fn world_queries(qs: &[Query], p: &Pose) -> Vec<Query> {
    qs.iter()
        .map(|q| {
            let (x, y) = p.apply_xy(q.x, q.y);
            Query { x, y, ..q.clone() }
        })
        .collect()
}

fn world_boxes(bs: &[BBox], p: &Pose) -> Vec<BBox> {
    bs.iter().map(|b| b.transformed(p)).collect()
}

/// Folds each heading into a half circle of the believed world frame so
/// every agent picks the same of the two box orientations.
fn canonical_in(bs: &mut [BBox], believed: &Pose) {
    for b in bs {
        b.yaw = canonical_heading(b.yaw + believed.yaw) - believed.yaw;
    }
}

/// One memory entry per detected box, at the box center.
pub fn object_queries(boxes: &[BBox]) -> Vec<Query> {
    boxes.iter().map(|b| Query::new(b.cx, b.cy, b.score, b.t, Vec::new())).collect()
}

/// Moves boxes to `t_to` with velocities tracked over `mem` (which holds
/// [`object_queries`]) and every query with the displacement of the nearest
/// box within the association gate.
///
/// Memory is keyed on object centers because nearest-neighbour association
/// over all queries would link a box to background cells around it.
pub fn time_align(
    queries: &[Query],
    boxes: &[BBox],
    t_from: f64,
    t_to: f64,
    mem: &MemoryQueue,
) -> Result<(Vec<Query>, Vec<BBox>), PipelineError> {
    let (_, moved) = compensate_latency(&object_queries(boxes), boxes, t_from, t_to, mem).map_err(runtime)?;
    let moved_queries = queries
        .iter()
        .map(|q| {
            let mut out = q.clone();
            let nearest = boxes
                .iter()
                .zip(&moved)
                .map(|(b, m)| ((q.x - b.cx).hypot(q.y - b.cy), b, m))
                .filter(|(d, _, _)| *d <= DEFAULT_GATE_RADIUS)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, b, m)) = nearest {
                out.x += m.cx - b.cx;
                out.y += m.cy - b.cy;
            }
            out.t = t_to;
            out
        })
        .collect();
    Ok((moved_queries, moved))
}

/// Greedy suppression by score: a box overlapping a kept box by more than
/// `iou` is dropped.
pub fn fuse_boxes(mut boxes: Vec<BBox>, iou: f64) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cx.total_cmp(&b.cx)).then(a.cy.total_cmp(&b.cy)));
    let mut kept: Vec<BBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| bev_iou(k, &b) <= iou) {
            kept.push(b);
        }
    }
    kept
}

/// Replays the message exchange for one sweep point and experiment.
pub fn evaluate_point(
    rec: &Recording,
    em: &ErrorModel,
    latency: &LatencySpec,
    exp: Experiment,
) -> Result<PointResult, PipelineError> {
    let scene = &rec.scene;
    let cfg = &scene.config;
    let n_agents = scene.agents.len();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut latency_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LATENCY_STREAM);
    let mut own_mem: Vec<MemoryQueue> = (0..n_agents).map(|_| MemoryQueue::default()).collect();
    let mut recv_mem: Vec<MemoryQueue> = (0..n_agents).map(|_| MemoryQueue::default()).collect();
    let mut latest: Vec<Option<Cpm>> = (0..n_agents).map(|_| None).collect();
    let mut queue = DeliveryQueue::new();
    let align_cfg = AlignConfig::default();
    let ego_actor = scene.agents[0].actor;

    let mut out = PointResult {
        frames: Vec::new(),
        pose_errors: Vec::new(),
        cpm_sizes: Vec::new(),
        fused_nodes: Vec::new(),
        first_cpms: BTreeMap::new(),
    };

    for (k, &t_g) in rec.times.iter().enumerate() {
        let mut ego_view: Option<(Vec<BBox>, Vec<Query>, Pose)> = None;
        for a in 0..n_agents {
            let af = &rec.frames[k][a];
            let believed = inject_pose_noise(&af.pose, em, &mut noise_rng);
            let wq = world_queries(&af.queries, &af.pose);
            let wb = world_boxes(&af.boxes, &af.pose);
            let (mut q_local, mut b_local) = if exp.uses_tam() {
                let (pq, pb) = time_align(&wq, &wb, af.t_start, t_g, &own_mem[a])?;
                let back = af.pose.inverse();
                (world_queries(&pq, &back), world_boxes(&pb, &back))
            } else {
                (af.queries.clone(), af.boxes.clone())
            };
            own_mem[a].push(&object_queries(&wb), af.t_start).map_err(runtime)?;
            let t_body = if exp.uses_tam() { t_g } else { af.t_start };
            let body = scene.actors[scene.agents[a].actor]
                .state_at(t_body)
                .transformed(&af.pose.inverse())
                .with_score(1.0)
                .with_time(t_body);
            b_local.push(body);
            canonical_in(&mut b_local, &believed);
            if a == 0 {
                ego_view = Some((b_local, q_local, believed));
                continue;
            }
            let (qs, bs) = select_by_score(&q_local, &b_local, cfg.run.cpm_threshold).map_err(runtime)?;
            q_local = qs;
            b_local = bs;
            let mut cpm = Cpm::new(scene.agents[a].id, believed, t_g);
            cpm.queries = q_local;
            cpm.boxes = b_local;
            let bytes = encode_cpm(&cpm).map_err(runtime)?;
            out.cpm_sizes.push(CpmSizeRow {
                frame: k,
                agent: cpm.agent_id,
                t: t_g,
                threshold: cfg.run.cpm_threshold,
                n_queries: cpm.queries.len(),
                n_boxes: cpm.boxes.len(),
                bytes: bytes.len(),
            });
            out.first_cpms.entry(cpm.agent_id).or_insert_with(|| bytes.clone());
            let wire = decode_cpm(&bytes).map_err(runtime)?;
            queue.deliver_with_latency(wire, t_g, latency.sample(&mut latency_rng));
        }
        let (ego_anchors, ego_queries, ego_believed) = ego_view.expect("agent 0 is the ego");
        // the ego body anchors alignment but is not a detection
        let ego_boxes = &ego_anchors[..ego_anchors.len() - 1];

        for d in queue.pop_ready(t_g) {
            let Some(a) = scene.agents.iter().position(|ag| ag.id == d.cpm.agent_id) else { continue };
            let newer = recv_mem[a].newest_time().map_or(true, |t| d.cpm.t > t);
            if !newer {
                continue;
            }
            recv_mem[a].push(&object_queries(&world_boxes(&d.cpm.boxes, &d.cpm.pose)), d.cpm.t).map_err(runtime)?;
            latest[a] = Some(d.cpm);
        }

        // (agent, boxes and queries in the sender frame, prior)
        let mut coop: Vec<(usize, Vec<BBox>, Vec<Query>, Pose)> = Vec::new();
        for a in 1..n_agents {
            let Some(cpm) = &latest[a] else { continue };
            if t_g - cpm.t > MAX_MESSAGE_AGE + 1e-9 {
                continue;
            }
            let (qs, bs) = if exp.uses_tam() {
                let wq = world_queries(&cpm.queries, &cpm.pose);
                let wb = world_boxes(&cpm.boxes, &cpm.pose);
                let (pq, pb) = time_align(&wq, &wb, cpm.t, t_g, &recv_mem[a])?;
                let back = cpm.pose.inverse();
                (world_queries(&pq, &back), world_boxes(&pb, &back))
            } else {
                (cpm.queries.clone(), cpm.boxes.clone())
            };
            coop.push((a, bs, qs, relative_pose(&ego_believed, &cpm.pose)));
        }

        let estimates: Vec<Pose> = if !exp.uses_pam() || coop.is_empty() {
            coop.iter().map(|c| c.3).collect()
        } else if coop.len() == 1 {
            vec![align_agent(&ego_anchors, &coop[0].1, &coop[0].3, &align_cfg).pose]
        } else {
            let mut boxes = vec![ego_anchors.clone()];
            let mut priors = vec![Pose::identity()];
            for c in &coop {
                boxes.push(c.1.clone());
                priors.push(c.3);
            }
            align_fleet(&boxes, &priors, &align_cfg).map_err(runtime)?.poses[1..].to_vec()
        };

        let mut fused = ego_boxes.to_vec();
        let mut coop_queries = Vec::new();
        for (c, est) in coop.iter().zip(&estimates) {
            // the sender frame is its sweep start in the frame it sent from
            let sent_at = latest[c.0].as_ref().expect("coop has a message").t;
            let msg_frame = rec.times.iter().position(|t| (*t - sent_at).abs() < 1e-9).expect("messages carry frame times");
            let truth_pose = rec.frames[msg_frame][c.0].pose;
            let truth = relative_pose(&rec.frames[k][0].pose, &truth_pose);
            out.pose_errors.push(pose_error(est, &truth));
            fused.extend(c.1.iter().map(|b| b.transformed(est)));
            let rotated = adapt_rotation(&c.2, &est.rotation_matrix()).map_err(runtime)?;
            coop_queries.extend(snap_to_grid(&rotated, est, DEFAULT_GRID_RES).map_err(runtime)?);
        }
        out.fused_nodes.push(knn_fuse(&ego_queries, &coop_queries, DEFAULT_FUSION_K).len());

        if k < WARMUP_FRAMES.min(rec.times.len().saturating_sub(1)) {
            continue;
        }
        let range = cfg.range;
        let ego_body = ego_anchors.last().expect("the ego body is appended");
        let dets: Vec<BBox> = fuse_boxes(fused, FUSION_NMS_IOU)
            .into_iter()
            .filter(|b| range.contains(b.cx, b.cy) && bev_iou(b, ego_body) == 0.0)
            .collect();
        let ego_frame = rec.frames[k][0].pose.inverse();
        let mut hits = vec![0usize; scene.actors.len()];
        for af in &rec.frames[k] {
            for (h, n) in hits.iter_mut().zip(&af.hits) {
                *h += n;
            }
        }
        let gts: Vec<BBox> = ground_truth_at(scene, t_g)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != ego_actor && hits[*i] >= cfg.run.min_gt_points)
            .map(|(_, b)| b.transformed(&ego_frame))
            .filter(|b| range.contains(b.cx, b.cy))
            .collect();
        out.frames.push(EvalFrame { dets, gts });
    }
    Ok(out)
}

/// Compact per-stage connectivity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub stride: i64,
    pub dims: u8,
    pub coords: usize,
    pub components: usize,
    pub largest_component: usize,
    pub largest_gap: i64,
    pub center_coverage: f64,
}

impl From<&StageReport> for StageSummary {
    fn from(r: &StageReport) -> Self {
        Self {
            stage: r.stage.clone(),
            stride: r.stride,
            dims: r.dims,
            coords: r.coords,
            components: r.connectivity.component_count,
            largest_component: r.connectivity.component_sizes.iter().copied().max().unwrap_or(0),
            largest_gap: r.connectivity.largest_gap,
            center_coverage: r.center_coverage,
        }
    }
}

/// Isolated-field and center-coverage diagnostics of the ego's first sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityDiag {
    pub scenario: String,
    pub agent: u32,
    pub t_start: f64,
    pub voxel_size: f64,
    pub input_voxels: usize,
    pub boxes: usize,
    pub standard: Vec<StageSummary>,
    pub expanding: Vec<StageSummary>,
}

pub fn grid_report(scene: &Scene) -> Result<ConnectivityDiag, PipelineError> {
    let t_g = frame_times(&scene.config).first().copied().unwrap_or(scene.config.frame_period);
    let t_start = scene.sweep_start(0, t_g);
    let scan = lidar_scan_labeled(scene, 0, t_start);
    let mut pc = preprocess(scene, 0, &scan.cloud, t_start)?;
    let h = scene.lidar.height;
    pc.points.retain(|p| p.z > -h - 0.5 && p.z < 1.5);
    let grid = voxelize(&pc, DEFAULT_VOXEL_SIZE, 3).map_err(runtime)?;
    let frame = scene.agent_pose(0, t_start).inverse();
    let hits = scan.hits_per_actor(scene.actors.len());
    let boxes: Vec<BBox> = scene
        .actors
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.agents[0].actor && hits[*i] >= scene.config.run.min_gt_points)
        .map(|(_, a)| a.state_at(t_start).transformed(&frame))
        .collect();
    let schedule = BackboneSchedule::default();
    let run = |expand| -> Result<Vec<StageSummary>, PipelineError> {
        Ok(schedule.run(&grid, &boxes, expand).map_err(runtime)?.iter().map(StageSummary::from).collect())
    };
    Ok(ConnectivityDiag {
        scenario: scene.config.name.clone(),
        agent: scene.agents[0].id,
        t_start,
        voxel_size: DEFAULT_VOXEL_SIZE,
        input_voxels: grid.len(),
        boxes: boxes.len(),
        standard: run(false)?,
        expanding: run(true)?,
    })
}

/// Metric rows of one sweep point and experiment.
pub fn metric_rows(run: &ResolvedRun, value: f64, exp: Experiment, res: &PointResult) -> Result<Vec<MetricRow>, PipelineError> {
    let spec = &run.config.run;
    let trans: Vec<f64> = res.pose_errors.iter().map(|e| e.0).collect();
    let rot: Vec<f64> = res.pose_errors.iter().map(|e| e.1).collect();
    spec.iou_thresholds
        .iter()
        .map(|&thr| {
            let ap = match average_precision(&res.frames, thr, spec.metric, spec.sorting) {
                Ok(ap) => ap,
                Err(e) => return Err(runtime(format!("{} at {}={value}: {e}", exp.name(), run.axis.name()))),
            };
            Ok(MetricRow {
                experiment: exp.name().into(),
                sweep: run.axis.name().into(),
                value,
                iou_thr: thr,
                metric: spec.metric,
                sorting: spec.sorting,
                ap,
                median_trans_err_m: median(&trans),
                median_rot_err_deg: median(&rot),
            })
        })
        .collect()
}

/// Everything a run produced, before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub run: ResolvedRun,
    pub rows: Vec<MetricRow>,
    pub cpm_sizes: Vec<CpmSizeRow>,
    pub connectivity: ConnectivityDiag,
    pub first_cpms: BTreeMap<u32, Vec<u8>>,
    pub fused_nodes: Vec<(Experiment, f64, f64)>,
}

/// Runs every sweep point and experiment; results are ordered by sweep
/// value, then experiment, then IoU threshold.
pub fn execute(run: &ResolvedRun) -> Result<RunOutput, PipelineError> {
    let scene = Scene::build(&run.config)?;
    let rec = record(&scene)?;
    let connectivity = grid_report(&scene)?;
    let jobs: Vec<(f64, Experiment)> = run.values.iter().flat_map(|&v| Experiment::ALL.map(|e| (v, e))).collect();
    let results: Vec<Result<(f64, Experiment, PointResult), PipelineError>> = jobs
        .par_iter()
        .map(|&(v, e)| {
            let (em, lat) = run.point(v);
            evaluate_point(&rec, &em, &lat, e).map(|r| (v, e, r))
        })
        .collect();
    let mut rows = Vec::new();
    let mut cpm_sizes = Vec::new();
    let mut first_cpms = BTreeMap::new();
    let mut fused_nodes = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (v, e, res) = r?;
        rows.extend(metric_rows(run, v, e, &res)?);
        let mean_nodes = res.fused_nodes.iter().sum::<usize>() as f64 / res.fused_nodes.len().max(1) as f64;
        fused_nodes.push((e, v, mean_nodes));
        if i == 0 {
            cpm_sizes = res.cpm_sizes;
            first_cpms = res.first_cpms;
        }
    }
    Ok(RunOutput { run: run.clone(), rows, cpm_sizes, connectivity, first_cpms, fused_nodes })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["experiment", "sweep", "value", "iou_thr", "metric", "sorting", "ap", "median_trans_err_m", "median_rot_err_deg"])
        .map_err(runtime)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.sweep.clone(),
            format!("{}", r.value),
            format!("{}", r.iou_thr),
            r.metric.to_string(),
            r.sorting.to_string(),
            format!("{:.6}", r.ap),
            fmt_opt(r.median_trans_err_m),
            fmt_opt(r.median_rot_err_deg),
        ])
        .map_err(runtime)?;
    }
    w.into_inner().map_err(runtime)
}

pub fn cpm_sizes_csv(rows: &[CpmSizeRow]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.into_inner().map_err(runtime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub sweep: SweepAxis,
    pub values: Vec<f64>,
    pub experiments: Vec<Experiment>,
    /// SHA-256 of every other output file.
    pub outputs: BTreeMap<String, String>,
}

/// Loads, runs and writes all artifacts into `out_dir`.
///
/// Files are staged under temporary names and renamed at the end, with
/// `metrics.csv` last, so a failed run never leaves a `metrics.csv`.
pub fn run_experiment(config_path: &Path, overrides: &Overrides, out_dir: &Path) -> Result<RunOutput, PipelineError> {
    let config = ScenarioConfig::load(config_path)?;
    let run = ResolvedRun::resolve(config, overrides)?;
    let output = execute(&run)?;
    write_outputs(&output, out_dir)?;
    Ok(output)
}

pub fn write_outputs(output: &RunOutput, out_dir: &Path) -> Result<(), PipelineError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| PipelineError::Io { path: path.clone(), source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("cpm_sizes.csv".into(), cpm_sizes_csv(&output.cpm_sizes)?),
        ("connectivity.json".into(), pretty_json(&output.connectivity)?),
    ];
    for (agent, bytes) in &output.first_cpms {
        files.push((format!("cpm_agent{agent}_frame0.bin"), bytes.clone()));
    }
    let metrics = metrics_csv(&output.rows)?;
    let mut outputs: BTreeMap<String, String> =
        files.iter().map(|(n, b)| (n.clone(), hex::encode(Sha256::digest(b)))).collect();
    outputs.insert("metrics.csv".into(), hex::encode(Sha256::digest(&metrics)));
    let manifest = Manifest {
        tool: "coopalign".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: output.run.config.name.clone(),
        seed: output.run.config.seed,
        config_hash: output.run.hash(),
        sweep: output.run.axis,
        values: output.run.values.clone(),
        experiments: Experiment::ALL.to_vec(),
        outputs,
    };
    files.push(("run_manifest.json".into(), pretty_json(&manifest)?));
    files.push(("metrics.csv".into(), metrics));

    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    for (name, bytes) in &files {
        let tmp = out_dir.join(format!(".{name}.partial"));
        std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
        staged.push((tmp, out_dir.join(name)));
    }
    for (tmp, dst) in staged {
        std::fs::rename(&tmp, &dst).map_err(io(&dst))?;
    }
    Ok(())
}

fn pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>, PipelineError> {
    let mut s = serde_json::to_vec_pretty(v).map_err(runtime)?;
    s.push(b'\n');
    Ok(s)
}
