//! Scenario files and actor kinematics.

use super::network::{ErrorModel, LatencySpec};
use crate::augment::LidarModel;
use crate::geometry::{wrap_angle, BBox, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), reason: reason.into() }
}

/// LiDAR section of a scenario file; angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub rings: usize,
    pub lowest_deg: f64,
    pub highest_deg: f64,
    pub azimuth_step_deg: f64,
    pub height: f64,
    pub sweep_time: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self { rings: 64, lowest_deg: -25.0, highest_deg: 3.0, azimuth_step_deg: 0.2, height: 1.9, sweep_time: 0.1, max_range: 120.0 }
    }
}

impl LidarSpec {
    pub fn model(&self) -> LidarModel {
        LidarModel {
            sweep_time: self.sweep_time,
            max_range: self.max_range,
            ..LidarModel::uniform(self.rings, self.lowest_deg, self.highest_deg, self.azimuth_step_deg, self.height)
        }
    }
}

/// Axis-aligned crop in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionRange {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for DetectionRange {
    fn default() -> Self {
        Self { x: [-140.0, 140.0], y: [-40.0, 40.0] }
    }
}

impl DetectionRange {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub yaw_rate: f64,
    /// Sweep start offset before each frame boundary (s), for asynchrony.
    #[serde(default)]
    pub scan_offset: f64,
    #[serde(default = "default_dims")]
    pub dims: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default = "default_dims")]
    pub dims: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub yaw_rate: f64,
}

fn default_dims() -> [f64; 3] {
    [4.5, 2.0, 1.6]
}

/// Randomly placed traffic on lanes parallel to the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub count: usize,
    pub x_range: [f64; 2],
    /// Lane center lines; each vehicle picks one.
    pub lanes: Vec<f64>,
    /// Signed speed along +x; negative drives toward −x.
    #[serde(default)]
    pub speed_range: [f64; 2],
    /// Fraction of vehicles that stay parked.
    #[serde(default)]
    pub parked_fraction: f64,
    #[serde(default = "default_min_gap")]
    pub min_gap: f64,
}

fn default_min_gap() -> f64 {
    7.0
}

/// Parameters of the cooperative pipeline run over a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub cpm_threshold: f64,
    pub max_queries: usize,
    pub feature_width: usize,
    pub sorting: crate::eval::Sorting,
    pub iou_thresholds: Vec<f64>,
    pub metric: crate::eval::IouMetric,
    /// GT boxes need this many LiDAR hits (over all agents) to be scored.
    pub min_gt_points: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            cpm_threshold: 0.0,
            max_queries: 1024,
            feature_width: 256,
            sorting: crate::eval::Sorting::Global,
            iou_thresholds: vec![0.5, 0.7],
            metric: crate::eval::IouMetric::Bev,
            min_gt_points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_period")]
    pub frame_period: f64,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub error_model: ErrorModel,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub range: DetectionRange,
    #[serde(default)]
    pub run: RunSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub traffic: Option<TrafficSpec>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_period() -> f64 {
    0.1
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration > 0.0) {
            return Err(field_err("duration", "must be positive"));
        }
        if !(self.frame_period > 0.0) {
            return Err(field_err("frame_period", "must be positive"));
        }
        self.lidar.model().validate().map_err(|e| field_err("lidar", e.to_string()))?;
        if self.lidar.sweep_time > self.frame_period + 1e-12 {
            return Err(field_err("lidar.sweep_time", "must not exceed frame_period"));
        }
        if !(0.0..=1.0).contains(&self.error_model.epsilon) {
            return Err(field_err("error_model.epsilon", "must lie in [0, 1]"));
        }
        self.latency.validate().map_err(|reason| field_err("latency", reason))?;
        if self.agents.is_empty() {
            return Err(field_err("agents", "at least one agent (the ego) is required"));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if self.agents[..i].iter().any(|b| b.id == a.id) {
                return Err(field_err(format!("agents[{i}].id"), format!("duplicate agent id {}", a.id)));
            }
            if !(0.0..self.frame_period).contains(&a.scan_offset) {
                return Err(field_err(format!("agents[{i}].scan_offset"), "must lie in [0, frame_period)"));
            }
            check_dims(&format!("agents[{i}].dims"), a.dims)?;
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            check_dims(&format!("vehicles[{i}].dims"), v.dims)?;
        }
        if let Some(t) = &self.traffic {
            if t.lanes.is_empty() {
                return Err(field_err("traffic.lanes", "at least one lane is required"));
            }
            if !(t.x_range[1] > t.x_range[0]) {
                return Err(field_err("traffic.x_range", "must be increasing"));
            }
            if t.speed_range[1] < t.speed_range[0] {
                return Err(field_err("traffic.speed_range", "must be non-decreasing"));
            }
            if !(0.0..=1.0).contains(&t.parked_fraction) {
                return Err(field_err("traffic.parked_fraction", "must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.run.cpm_threshold) {
            return Err(field_err("run.cpm_threshold", "must lie in [0, 1]"));
        }
        if self.run.feature_width < 32 || self.run.feature_width > u16::MAX as usize {
            return Err(field_err("run.feature_width", "must lie in [32, 65535]"));
        }
        if self.run.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(field_err("run.iou_thresholds", "each threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration / self.frame_period + 1e-9).floor() as usize
    }
}

fn check_dims(field: &str, d: [f64; 3]) -> Result<(), ConfigError> {
    if d.iter().all(|v| *v > 0.0) {
        Ok(())
    } else {
        Err(field_err(field, "dimensions must be positive"))
    }
}

/// A rigid body moving with constant speed and turn rate.
///
/// The velocity vector rotates with the heading, so the path is an exact
/// circular arc (a straight line when `yaw_rate` is zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub initial: BBox,
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
}

impl Actor {
    pub fn state_at(&self, t: f64) -> BBox {
        let w = self.yaw_rate;
        let [vx, vy] = self.velocity;
        let (dx, dy) = if w.abs() < 1e-12 {
            (vx * t, vy * t)
        } else {
            let (s, c) = (w * t).sin_cos();
            let a = s / w;
            let b = (1.0 - c) / w;
            (a * vx - b * vy, b * vx + a * vy)
        };
        let mut b = self.initial;
        b.cx += dx;
        b.cy += dy;
        b.yaw = wrap_angle(b.yaw + w * t);
        b.t = t;
        b
    }

    pub fn velocity_at(&self, t: f64) -> [f64; 2] {
        let (s, c) = (self.yaw_rate * t).sin_cos();
        [c * self.velocity[0] - s * self.velocity[1], s * self.velocity[0] + c * self.velocity[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentInfo {
    pub id: u32,
    /// Index of the agent's own body in `Scene::actors`.
    pub actor: usize,
    pub scan_offset: f64,
}

/// A scenario expanded into concrete actors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: ScenarioConfig,
    pub lidar: LidarModel,
    pub actors: Vec<Actor>,
    pub agents: Vec<AgentInfo>,
}

impl Scene {
    /// Agents come first in `actors`, then listed vehicles, then traffic.
    pub fn build(config: &ScenarioConfig) -> Result<Scene, ConfigError> {
        config.validate()?;
        let mut actors = Vec::new();
        let mut agents = Vec::new();
        for a in &config.agents {
            agents.push(AgentInfo { id: a.id, actor: actors.len(), scan_offset: a.scan_offset });
            actors.push(Actor {
                initial: BBox::new([a.x, a.y, a.dims[2] / 2.0], a.dims, a.yaw_deg.to_radians()),
                velocity: a.velocity,
                yaw_rate: a.yaw_rate,
            });
        }
        for v in &config.vehicles {
            actors.push(Actor {
                initial: BBox::new([v.x, v.y, v.dims[2] / 2.0], v.dims, v.yaw_deg.to_radians()),
                velocity: v.velocity,
                yaw_rate: v.yaw_rate,
            });
        }
        if let Some(t) = &config.traffic {
            place_traffic(t, config.seed, config.duration, &mut actors);
        }
        Ok(Scene { config: config.clone(), lidar: config.lidar.model(), actors, agents })
    }

    /// True sensor pose of agent `a` at time `t`.
    pub fn agent_pose(&self, a: usize, t: f64) -> Pose {
        let b = self.actors[self.agents[a].actor].state_at(t);
        Pose { x: b.cx, y: b.cy, z: self.lidar.height, yaw: b.yaw }
    }

    /// Sweep start of agent `a` for the frame ending at `t_g`.
    pub fn sweep_start(&self, a: usize, t_g: f64) -> f64 {
        t_g - self.lidar.sweep_time - self.agents[a].scan_offset
    }
}

/// Every actor box at `t_g`, world frame, indexed like `Scene::actors`.
pub fn ground_truth_at(scene: &Scene, t_g: f64) -> Vec<BBox> {
    scene.actors.iter().map(|a| a.state_at(t_g)).collect()
}

fn place_traffic(spec: &TrafficSpec, seed: u64, duration: f64, actors: &mut Vec<Actor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6166_6669_63);
    let dims = default_dims();
    // one speed per lane keeps lane traffic collision free
    let lane_speeds: Vec<f64> = spec
        .lanes
        .iter()
        .map(|_| {
            let parked = rng.random::<f64>() < spec.parked_fraction;
            if parked {
                0.0
            } else if spec.speed_range[1] > spec.speed_range[0] {
                rng.random_range(spec.speed_range[0]..spec.speed_range[1])
            } else {
                spec.speed_range[0]
            }
        })
        .collect();
    let checks: Vec<f64> = (0..=(duration / 0.1).ceil() as usize).map(|i| (i as f64 * 0.1).min(duration)).collect();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.count && attempts < spec.count * 200 {
        attempts += 1;
        let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
        let lane = rng.random_range(0..spec.lanes.len());
        let speed = lane_speeds[lane];
        let yaw = if speed < 0.0 { std::f64::consts::PI } else { 0.0 };
        let cand = Actor { initial: BBox::new([x, spec.lanes[lane], dims[2] / 2.0], dims, yaw), velocity: [speed, 0.0], yaw_rate: 0.0 };
        // agents and listed vehicles do not yield, so keep clear of them all run long
        let clash = checks.iter().any(|&t| {
            let c = cand.state_at(t);
            actors.iter().any(|a| {
                let o = a.state_at(t);
                (o.cx - c.cx).hypot(o.cy - c.cy) < spec.min_gap
            })
        });
        if clash {
            continue;
        }
        actors.push(cand);
        placed += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        duration = 1.0
        [[agents]]
        id = 0
        x = 0.0
        y = 0.0
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.frame_period, 0.1);
        assert_eq!(cfg.frame_count(), 10);
        assert_eq!(cfg.lidar.model(), LidarModel::default());
        assert_eq!(cfg.run.max_queries, 1024);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = ScenarioConfig::from_toml_str("seed = 3\nduration = \n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ScenarioConfig::from_toml_str("seed = 3\nduration = 1.0\nbogus = 1\n[[agents]]\nid=0\nx=0.0\ny=0.0\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn field_errors_name_the_field() {
        let bad = MINIMAL.replace("duration = 1.0", "duration = 1.0\n[error_model]\nepsilon = 2.0");
        let err = ScenarioConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("error_model.epsilon"), "{err}");
        let dup = format!("{MINIMAL}\n[[agents]]\nid = 0\nx = 5.0\ny = 0.0\n");
        let err = ScenarioConfig::from_toml_str(&dup).unwrap_err();
        assert!(err.to_string().contains("agents[1].id"), "{err}");
    }

    #[test]
    fn kinematics_examples() {
        let parked = Actor { initial: BBox::new([3.0, 4.0, 0.8], [4.5, 2.0, 1.6], 0.3), velocity: [0.0, 0.0], yaw_rate: 0.0 };
        let a = parked.state_at(0.0);
        let b = parked.state_at(7.5);
        assert_eq!((a.cx, a.cy, a.yaw), (b.cx, b.cy, b.yaw));

        let mover = Actor { velocity: [10.0, 0.0], ..parked };
        assert!((mover.state_at(0.1).cx - 4.0).abs() < 1e-12);

        let turner = Actor { yaw_rate: 0.5, ..parked };
        assert!((turner.state_at(0.2).yaw - 0.4).abs() < 1e-12);
    }

    #[test]
    fn arc_integration_matches_fine_euler_steps() {
        let a = Actor { initial: BBox::new([0.0, 0.0, 0.8], [4.5, 2.0, 1.6], 0.0), velocity: [8.0, 1.0], yaw_rate: 0.7 };
        let (mut x, mut y) = (0.0, 0.0);
        let n = 200_000;
        let dt = 2.0 / n as f64;
        for k in 0..n {
            let v = a.velocity_at((k as f64 + 0.5) * dt);
            x += v[0] * dt;
            y += v[1] * dt;
        }
        let s = a.state_at(2.0);
        assert!((s.cx - x).abs() < 1e-8 && (s.cy - y).abs() < 1e-8);
    }

    #[test]
    fn traffic_is_seeded() {
        let cfg = format!(
            "{MINIMAL}\n[traffic]\ncount = 10\nx_range = [-60.0, 60.0]\nlanes = [-3.5, 3.5]\nspeed_range = [-10.0, 10.0]\n"
        );
        let cfg = ScenarioConfig::from_toml_str(&cfg).unwrap();
        let a = Scene::build(&cfg).unwrap();
        let b = Scene::build(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.actors.len(), 11);
        let mut other = cfg.clone();
        other.seed = 4;
        assert_ne!(Scene::build(&other).unwrap().actors, a.actors);
    }

    #[test]
    fn traffic_never_collides() {
        let cfg = format!(
            "{MINIMAL}\n[traffic]\ncount = 40\nx_range = [-80.0, 80.0]\nlanes = [-3.5, 0.0, 3.5]\nspeed_range = [-12.0, 12.0]\n"
        );
        let cfg = ScenarioConfig::from_toml_str(&cfg).unwrap();
        let scene = Scene::build(&cfg).unwrap();
        for k in 0..=10 {
            let t = k as f64 * 0.1;
            let boxes: Vec<BBox> = scene.actors.iter().map(|a| a.state_at(t)).collect();
            for i in 0..boxes.len() {
                for j in (i + 1)..boxes.len() {
                    assert_eq!(crate::geometry::bev_iou(&boxes[i], &boxes[j]), 0.0, "actors {i} and {j} at t={t}");
                }
            }
        }
    }
}
