//! Detection evaluation: IoU matching, average precision, pose error.

use crate::geometry::{angle_diff, bev_iou, iou_3d, BBox, Pose};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth boxes: average precision is undefined")]
    NoGroundTruth,
    #[error("no frames to evaluate")]
    NoFrames,
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMetric {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMetric {
    pub fn iou(self, a: &BBox, b: &BBox) -> f64 {
        match self {
            IouMetric::Bev => bev_iou(a, b),
            IouMetric::ThreeD => iou_3d(a, b),
        }
    }
}

impl fmt::Display for IouMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouMetric::Bev => "bev",
            IouMetric::ThreeD => "3d",
        })
    }
}

impl FromStr for IouMetric {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bev" => Ok(IouMetric::Bev),
            "3d" => Ok(IouMetric::ThreeD),
            _ => Err(EvalError::Unknown { kind: "IoU metric", value: s.to_owned() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sorting {
    /// Pool all detections and rank once.
    Global,
    /// Rank within each frame and concatenate frame by frame.
    Local,
}

impl fmt::Display for Sorting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sorting::Global => "global",
            Sorting::Local => "local",
        })
    }
}

impl FromStr for Sorting {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Sorting::Global),
            "local" => Ok(Sorting::Local),
            _ => Err(EvalError::Unknown { kind: "sorting mode", value: s.to_owned() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Per detection, in input order.
    pub tp: Vec<bool>,
    /// Per detection, the matched ground-truth index.
    pub matched_gt: Vec<Option<usize>>,
}

/// Descending score, ties by input index.
fn score_order(dets: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: in score order, each detection takes the unmatched
/// ground truth of highest IoU if that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thr: f64, metric: IouMetric) -> Result<MatchOutcome, EvalError> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(EvalError::BadThreshold(iou_thr));
    }
    let mut taken = vec![false; gts.len()];
    let mut out = MatchOutcome { tp: vec![false; dets.len()], matched_gt: vec![None; dets.len()] };
    for d in score_order(dets) {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = metric.iou(&dets[d], gt);
            if iou >= iou_thr && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out.tp[d] = true;
            out.matched_gt[d] = Some(g);
        }
    }
    Ok(out)
}

/// One evaluation frame: detections and ground truth in the same frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub dets: Vec<BBox>,
    pub gts: Vec<BBox>,
}

/// Precision and recall after each ranked detection.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Ranked TP flags and the total ground-truth count.
pub fn ranked_hits(frames: &[EvalFrame], iou_thr: f64, metric: IouMetric, sorting: Sorting) -> Result<(Vec<bool>, usize), EvalError> {
    if frames.is_empty() {
        return Err(EvalError::NoFrames);
    }
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let m = match_detections(&f.dets, &f.gts, iou_thr, metric)?;
        for (rank, d) in score_order(&f.dets).into_iter().enumerate() {
            scored.push((f.dets[d].score, fi, rank, m.tp[d]));
        }
    }
    if sorting == Sorting::Global {
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    }
    Ok((scored.into_iter().map(|s| s.3).collect(), n_gt))
}

pub fn pr_curve(hits: &[bool], n_gt: usize) -> PrCurve {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve { precision: Vec::with_capacity(hits.len()), recall: Vec::with_capacity(hits.len()) };
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    curve
}

/// All-point interpolated area under the precision-recall curve.
pub fn ap_from_curve(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (curve.recall[i] - prev_recall) * envelope[i];
        prev_recall = curve.recall[i];
    }
    ap
}

pub fn average_precision(frames: &[EvalFrame], iou_thr: f64, metric: IouMetric, sorting: Sorting) -> Result<f64, EvalError> {
    let (hits, n_gt) = ranked_hits(frames, iou_thr, metric, sorting)?;
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(ap_from_curve(&pr_curve(&hits, n_gt)))
}

/// Translation (m) and absolute heading (degrees) of `T_est⁻¹ · T_gt`.
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    let d = est.inverse().compose(gt);
    (d.x.hypot(d.y), angle_diff(gt.yaw, est.yaw).abs().to_degrees())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub sweep: String,
    pub value: f64,
    pub iou_thr: f64,
    pub metric: IouMetric,
    pub sorting: Sorting,
    pub ap: f64,
    pub median_trans_err_m: Option<f64>,
    pub median_rot_err_deg: Option<f64>,
}
