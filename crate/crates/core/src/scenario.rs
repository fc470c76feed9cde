//! Declarative scenario files (TOML) and their validated in-memory form.
//!
//! The file schema is documented in `docs/scenario.md`. Parsing happens in two
//! steps: `serde` maps the text onto plain `*File` structs (syntax errors carry
//! line and column), then [`ScenarioConfig::from_file`] checks every
//! module-level invariant and reports the offending field path.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::channel::{ChannelModel, ClockModel, LatencyDistribution, NodeId, DEFAULT_RANGE_M};
use crate::geo::{GeoError, Geofence};
use crate::orchestration::{
    AnalysisRule, DeploymentPlan, OrchestratorState, Trigger, DEFAULT_IDLE_TIMEOUT_S,
};
use crate::v2x::{GeoPosition, StationId};

/// 2026-02-02T00:00:00Z, used when a scenario does not pin its own epoch.
pub const DEFAULT_EPOCH_START_MS: u64 = 1_769_990_400_000;

const SERVER_RSU_SKEW_MS: f64 = 20.0;
const VEHICLE_RSU_SKEW_MS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl fmt::Display) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsuNode {
    pub id: NodeId,
    pub station_id: StationId,
    pub position: GeoPosition,
    /// Carries the ITS-G5 sender/receiver. Exactly one per scenario.
    pub hosts_v2x: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t_s: f64,
    pub position: GeoPosition,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Waypoints(Vec<Waypoint>),
    /// Straight approach at constant speed. `bearing_deg` points from the
    /// target towards the start, i.e. the direction the vehicle comes from.
    Approach {
        bearing_deg: f64,
        start_distance_m: f64,
        speed_kmh: f64,
        target: GeoPosition,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleAgent {
    pub station_id: StationId,
    pub route: Route,
    pub cam_period_ms: u32,
}

impl VehicleAgent {
    pub fn node_id(&self) -> NodeId {
        NodeId::vehicle(self.station_id.get())
    }
}

/// Fixed processing and link delays along the perception pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtherLatencies {
    pub event_detection_ms: f64,
    pub object_list_uplink_ms: f64,
    pub fusion_processing_ms: f64,
    pub cpm_generation_ms: f64,
    pub cpm_downlink_ms: f64,
}

impl Default for OtherLatencies {
    fn default() -> Self {
        OtherLatencies {
            event_detection_ms: 5.0,
            object_list_uplink_ms: 20.0,
            fusion_processing_ms: 30.0,
            cpm_generation_ms: 5.0,
            cpm_downlink_ms: 20.0,
        }
    }
}

impl OtherLatencies {
    fn legs(&self) -> [(&'static str, f64); 5] {
        [
            ("event_detection_ms", self.event_detection_ms),
            ("object_list_uplink_ms", self.object_list_uplink_ms),
            ("fusion_processing_ms", self.fusion_processing_ms),
            ("cpm_generation_ms", self.cpm_generation_ms),
            ("cpm_downlink_ms", self.cpm_downlink_ms),
        ]
    }

    pub fn total_ms(&self) -> f64 {
        self.legs().iter().map(|(_, v)| v).sum()
    }
}

/// Explicit clock offsets; nodes not listed get a random offset drawn once
/// per run (server 0, roadside units within ±20 ms of the server, vehicles
/// within ±2 ms of the V2X host), or 0 when `randomize_missing` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockConfig {
    pub offsets_ms: ClockModel,
    pub randomize_missing: bool,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            offsets_ms: ClockModel::default(),
            randomize_missing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub rsus: Vec<RsuNode>,
    pub vehicles: Vec<VehicleAgent>,
    pub channel: ChannelModel,
    pub clocks: ClockConfig,
    pub rule: AnalysisRule,
    pub plan: DeploymentPlan,
    pub idle_timeout_s: f64,
    /// CAM forwarding from the V2X host to the server.
    pub uplink_latency_ms: f64,
    pub fusion_period_ms: f64,
    pub other_latencies: OtherLatencies,
    /// Vehicles within this distance of a perceiving unit appear in CPMs.
    pub sensor_range_m: f64,
    pub end_time_s: f64,
    pub epoch_start_ms: u64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn v2x_host(&self) -> &RsuNode {
        self.rsus
            .iter()
            .find(|r| r.hosts_v2x)
            .expect("validated scenarios have a V2X host")
    }

    /// Roadside units that host at least one service of the plan, in
    /// declaration order. Each one feeds an object list into every fusion cycle.
    pub fn perception_rsus(&self) -> Vec<usize> {
        let hosts: BTreeSet<&NodeId> = self.plan.services.iter().map(|s| &s.node).collect();
        (0..self.rsus.len())
            .filter(|&i| hosts.contains(&self.rsus[i].id))
            .collect()
    }

    /// Every node taking part in the run.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![NodeId::server()];
        ids.extend(self.rsus.iter().map(|r| r.id.clone()));
        ids.extend(self.vehicles.iter().map(|v| v.node_id()));
        ids
    }

    /// Full clock model for a run, filling unlisted nodes as described on
    /// [`ClockConfig`]. Draws come from a stream separate from the channel's.
    pub fn resolve_clocks(&self, seed: u64) -> ClockModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let explicit = &self.clocks.offsets_ms.offsets_ms;
        let mut draw = |node: &NodeId, skew: f64, base: f64| -> f64 {
            // always draw so an explicit value for one node leaves others unchanged
            let r: f64 = rng.random_range(-skew..=skew);
            match explicit.get(node) {
                Some(&v) => v,
                None if self.clocks.randomize_missing => base + r,
                None => 0.0,
            }
        };
        let mut model = ClockModel::default();
        let server = NodeId::server();
        let server_off = draw(&server, 0.0, 0.0);
        model.offsets_ms.insert(server, server_off);
        for rsu in &self.rsus {
            let off = draw(&rsu.id, SERVER_RSU_SKEW_MS, server_off);
            model.offsets_ms.insert(rsu.id.clone(), off);
        }
        let host_off = model.offsets_ms[&self.v2x_host().id];
        for v in &self.vehicles {
            let off = draw(&v.node_id(), VEHICLE_RSU_SKEW_MS, host_off);
            model.offsets_ms.insert(v.node_id(), off);
        }
        model
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let hosts = self.rsus.iter().filter(|r| r.hosts_v2x).count();
        if hosts != 1 {
            return Err(invalid(
                "rsus.hosts_v2x",
                format!("exactly one roadside unit must host V2X, found {hosts}"),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, rsu) in self.rsus.iter().enumerate() {
            if rsu.id == NodeId::server() || rsu.id.as_str().starts_with("vehicle-") {
                return Err(invalid(format!("rsus[{i}].id"), "reserved node id"));
            }
            if !ids.insert(&rsu.id) {
                return Err(invalid(format!("rsus[{i}].id"), "duplicate id"));
            }
        }
        let mut stations = BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            if !stations.insert(v.station_id) {
                return Err(invalid(
                    format!("vehicles[{i}].station_id"),
                    "duplicate station id",
                ));
            }
            if v.cam_period_ms == 0 {
                return Err(invalid(
                    format!("vehicles[{i}].cam_period_ms"),
                    "must be positive",
                ));
            }
            validate_route(&v.route).map_err(|m| invalid(format!("vehicles[{i}].route"), m))?;
        }
        self.channel.validate().map_err(|e| invalid("channel", e))?;
        for (node, off) in &self.clocks.offsets_ms.offsets_ms {
            if !off.is_finite() {
                return Err(invalid(
                    format!("clocks.offsets_ms.{node}"),
                    "must be finite",
                ));
            }
        }
        self.rule.validate().map_err(|e| invalid("rule", e))?;
        self.plan.validate().map_err(|e| invalid("plan", e))?;
        for (i, svc) in self.plan.services.iter().enumerate() {
            if svc.node != NodeId::server() && !ids.contains(&svc.node) {
                return Err(invalid(
                    format!("plan.services[{i}].node"),
                    format!("unknown node {}", svc.node),
                ));
            }
        }
        if self.perception_rsus().is_empty() {
            return Err(invalid(
                "plan.services",
                "no service runs on a roadside unit, so nothing feeds the fusion",
            ));
        }
        OrchestratorState::new(self.idle_timeout_s).map_err(|e| invalid("idle_timeout_s", e))?;
        let nonneg = [
            ("uplink_latency_ms", self.uplink_latency_ms),
            ("sensor_range_m", self.sensor_range_m),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(field, "must be a non-negative number"));
            }
        }
        for (leg, v) in self.other_latencies.legs() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(
                    format!("other_latencies.{leg}"),
                    "must be a non-negative number",
                ));
            }
        }
        if !(self.fusion_period_ms > 0.0) || !self.fusion_period_ms.is_finite() {
            return Err(invalid("fusion_period_ms", "must be positive"));
        }
        if !(self.end_time_s >= 0.0) || !self.end_time_s.is_finite() {
            return Err(invalid("end_time_s", "must be a non-negative number"));
        }
        Ok(())
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let rsus = file
            .rsus
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let field = |f: &str| format!("rsus[{i}].{f}");
                Ok(RsuNode {
                    id: NodeId::new(r.id.clone()),
                    station_id: StationId::new(r.station_id)
                        .map_err(|e| invalid(field("station_id"), e))?,
                    position: position(r.position, &field("position"))?,
                    hosts_v2x: r.hosts_v2x,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;

        let vehicles = file
            .vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let field = |f: &str| format!("vehicles[{i}].{f}");
                let route = match &v.route {
                    RouteFile::Approach {
                        bearing_deg,
                        start_distance_m,
                        speed_kmh,
                        target,
                    } => Route::Approach {
                        bearing_deg: *bearing_deg,
                        start_distance_m: *start_distance_m,
                        speed_kmh: *speed_kmh,
                        target: position(*target, &field("route.target"))?,
                    },
                    RouteFile::Waypoints { points } => Route::Waypoints(
                        points
                            .iter()
                            .enumerate()
                            .map(|(k, w)| {
                                Ok(Waypoint {
                                    t_s: w.t_s,
                                    position: position(
                                        w.at,
                                        &field(&format!("route.points[{k}].at")),
                                    )?,
                                })
                            })
                            .collect::<Result<_, ScenarioError>>()?,
                    ),
                };
                Ok(VehicleAgent {
                    station_id: StationId::new(v.station_id)
                        .map_err(|e| invalid(field("station_id"), e))?,
                    route,
                    cam_period_ms: v.cam_period_ms,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;

        let idle_timeout_s = file.idle_timeout_s;
        let rule = rule_from_file(&file.rule, idle_timeout_s)?;

        let mut channel = file.channel.into_model();
        if file.zero_variance {
            channel.cam_latency = channel.cam_latency.zero_variance();
            channel.cpm_latency = channel.cpm_latency.zero_variance();
        }

        let config = ScenarioConfig {
            name: file.name,
            rsus,
            vehicles,
            channel,
            clocks: ClockConfig {
                offsets_ms: ClockModel {
                    offsets_ms: file
                        .clocks
                        .offsets_ms
                        .into_iter()
                        .map(|(k, v)| (NodeId::new(k), v))
                        .collect(),
                },
                randomize_missing: file.clocks.randomize_missing,
            },
            rule,
            plan: file.plan,
            idle_timeout_s,
            uplink_latency_ms: file.uplink_latency_ms,
            fusion_period_ms: file.fusion_period_ms,
            other_latencies: file.other_latencies,
            sensor_range_m: file.sensor_range_m,
            end_time_s: file.end_time_s,
            epoch_start_ms: file.epoch_start_ms,
            seed: file.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

fn validate_route(route: &Route) -> Result<(), String> {
    match route {
        Route::Approach {
            bearing_deg,
            start_distance_m,
            speed_kmh,
            ..
        } => {
            if !(*speed_kmh > 0.0) || !speed_kmh.is_finite() {
                return Err("speed_kmh must be positive".into());
            }
            if !(*start_distance_m >= 0.0) || !start_distance_m.is_finite() {
                return Err("start_distance_m must be non-negative".into());
            }
            if !bearing_deg.is_finite() {
                return Err("bearing_deg must be finite".into());
            }
            Ok(())
        }
        Route::Waypoints(points) => {
            if points.is_empty() {
                return Err("needs at least one waypoint".into());
            }
            if !points[0].t_s.is_finite() || points[0].t_s < 0.0 {
                return Err("waypoint times must be non-negative".into());
            }
            if points.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
                return Err("waypoint times must be strictly increasing".into());
            }
            Ok(())
        }
    }
}

fn position(latlon: [f64; 2], field: &str) -> Result<GeoPosition, ScenarioError> {
    GeoPosition::from_degrees(latlon[0], latlon[1]).map_err(|e| invalid(field, e))
}

fn rule_from_file(rule: &RuleFile, idle_timeout_s: f64) -> Result<AnalysisRule, ScenarioError> {
    let station_filter = match &rule.station_filter {
        None => None,
        Some(ids) => Some(
            ids.iter()
                .map(|&id| StationId::new(id).map_err(|e| invalid("rule.station_filter", e)))
                .collect::<Result<BTreeSet<_>, _>>()?,
        ),
    };
    let trigger = match rule.kind {
        RuleKind::FirstCam => Trigger::FirstCam { station_filter },
        RuleKind::Geofence => {
            let fence = rule
                .fence
                .as_ref()
                .ok_or_else(|| invalid("rule.fence", "geofence rules need a fence"))?;
            let fence = match fence {
                FenceFile::Circle { center, radius_m } => {
                    Geofence::circle(position(*center, "rule.fence.center")?, *radius_m)
                }
                FenceFile::Polygon { vertices } => Geofence::polygon(
                    vertices
                        .iter()
                        .map(|v| position(*v, "rule.fence.vertices"))
                        .collect::<Result<_, _>>()?,
                ),
            }
            .map_err(|e: GeoError| invalid("rule.fence", e))?;
            Trigger::GeofencePresence {
                fence,
                station_filter,
            }
        }
    };
    Ok(AnalysisRule {
        trigger,
        cooldown_s: rule.cooldown_s.unwrap_or(idle_timeout_s),
    })
}

// ---- file schema ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub end_time_s: f64,
    #[serde(default = "default_epoch")]
    pub epoch_start_ms: u64,
    /// Collapse both channel latency distributions onto their means.
    #[serde(default)]
    pub zero_variance: bool,
    #[serde(default = "default_idle_timeout")]
    pub idle_timeout_s: f64,
    #[serde(default = "default_uplink")]
    pub uplink_latency_ms: f64,
    #[serde(default = "default_fusion_period")]
    pub fusion_period_ms: f64,
    #[serde(default = "default_sensor_range")]
    pub sensor_range_m: f64,
    #[serde(default)]
    pub other_latencies: OtherLatencies,
    #[serde(default)]
    pub channel: ChannelFile,
    #[serde(default)]
    pub clocks: ClocksFile,
    pub rule: RuleFile,
    pub plan: DeploymentPlan,
    #[serde(default)]
    pub rsus: Vec<RsuFile>,
    #[serde(default)]
    pub vehicles: Vec<VehicleFile>,
}

fn default_epoch() -> u64 {
    DEFAULT_EPOCH_START_MS
}
fn default_idle_timeout() -> f64 {
    DEFAULT_IDLE_TIMEOUT_S
}
fn default_uplink() -> f64 {
    20.0
}
fn default_fusion_period() -> f64 {
    100.0
}
fn default_sensor_range() -> f64 {
    120.0
}
fn default_cam_period() -> u32 {
    100
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelFile {
    pub range_m: f64,
    pub loss_probability: f64,
    pub cam_latency: LatencyDistribution,
    pub cpm_latency: LatencyDistribution,
}

impl Default for ChannelFile {
    fn default() -> Self {
        ChannelFile {
            range_m: DEFAULT_RANGE_M,
            loss_probability: 0.0,
            cam_latency: LatencyDistribution::CAM_ITS_G5,
            cpm_latency: LatencyDistribution::CPM_ITS_G5,
        }
    }
}

impl ChannelFile {
    fn into_model(self) -> ChannelModel {
        ChannelModel {
            range_m: self.range_m,
            cam_latency: self.cam_latency,
            cpm_latency: self.cpm_latency,
            loss_probability: self.loss_probability,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClocksFile {
    #[serde(default = "default_true")]
    pub randomize_missing: bool,
    #[serde(default)]
    pub offsets_ms: std::collections::BTreeMap<String, f64>,
}

impl Default for ClocksFile {
    fn default() -> Self {
        ClocksFile {
            randomize_missing: true,
            offsets_ms: Default::default(),
        }
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    FirstCam,
    Geofence,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub kind: RuleKind,
    pub cooldown_s: Option<f64>,
    pub station_filter: Option<Vec<u32>>,
    pub fence: Option<FenceFile>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FenceFile {
    Circle { center: [f64; 2], radius_m: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsuFile {
    pub id: String,
    pub station_id: u32,
    /// `[latitude, longitude]` in degrees.
    pub position: [f64; 2],
    #[serde(default)]
    pub hosts_v2x: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleFile {
    pub station_id: u32,
    #[serde(default = "default_cam_period")]
    pub cam_period_ms: u32,
    pub route: RouteFile,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouteFile {
    Approach {
        bearing_deg: f64,
        start_distance_m: f64,
        speed_kmh: f64,
        target: [f64; 2],
    },
    Waypoints {
        points: Vec<WaypointFile>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointFile {
    pub t_s: f64,
    pub at: [f64; 2],
}
