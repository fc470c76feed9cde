//! Demand-driven control loop: the event detector that turns CAMs into
//! deployment requests, the readiness model for a service dependency graph,
//! and the application-manager state machine.
//!
//! Pod creation for every service starts at the same instant (the manager
//! installs all of them together); `requires` edges only gate when a
//! service's output becomes usable. A service is usable at
//! `max(own ready, usable time of everything it requires)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::NodeId;
use crate::geo::Geofence;
use crate::time::SimTime;
use crate::v2x::{CamMessage, StationId};

pub const DEFAULT_IDLE_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestrationError {
    #[error("dependency cycle involving service {0:?}")]
    CyclicDependency(String),
    #[error("sink service {0:?} is not part of the plan")]
    UnknownSink(String),
    #[error("service {service:?} requires unknown service {missing:?}")]
    UnknownRequirement { service: String, missing: String },
    #[error("duplicate service name {0:?}")]
    DuplicateService(String),
    #[error("service {service:?} stage {label:?} has invalid duration {duration_s}")]
    InvalidStage {
        service: String,
        label: String,
        duration_s: f64,
    },
    #[error("manager processing time must be non-negative, got {0}")]
    InvalidManagerProcessing(f64),
    #[error("cooldown must be non-negative, got {0}")]
    InvalidCooldown(f64),
    #[error("idle timeout must be positive, got {0}")]
    InvalidIdleTimeout(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trigger {
    /// Fire on the first matching CAM since the orchestrator was last idle.
    FirstCam {
        station_filter: Option<BTreeSet<StationId>>,
    },
    /// Fire while a matching station reports a position inside the fence.
    GeofencePresence {
        fence: Geofence,
        station_filter: Option<BTreeSet<StationId>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRule {
    pub trigger: Trigger,
    pub cooldown_s: f64,
}

impl AnalysisRule {
    pub fn first_cam(cooldown_s: f64) -> Self {
        AnalysisRule {
            trigger: Trigger::FirstCam {
                station_filter: None,
            },
            cooldown_s,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestrationError> {
        if !(self.cooldown_s >= 0.0) || !self.cooldown_s.is_finite() {
            return Err(OrchestrationError::InvalidCooldown(self.cooldown_s));
        }
        Ok(())
    }

    /// Whether `cam` counts as demand under this rule.
    pub fn matches(&self, cam: &CamMessage) -> bool {
        let passes = |filter: &Option<BTreeSet<StationId>>| {
            filter
                .as_ref()
                .is_none_or(|ids| ids.contains(&cam.station_id))
        };
        match &self.trigger {
            Trigger::FirstCam { station_filter } => passes(station_filter),
            Trigger::GeofencePresence {
                fence,
                station_filter,
            } => passes(station_filter) && fence.contains(cam.position),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeploymentRequest {
    /// Detector node clock.
    pub requested_at: SimTime,
    pub triggering_station: StationId,
    pub triggering_cam_generation_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: String,
    pub duration_s: f64,
}

impl Stage {
    pub fn new(label: impl Into<String>, duration_s: f64) -> Self {
        Stage {
            label: label.into(),
            duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub node: NodeId,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub requires: BTreeSet<String>,
}

impl ServiceSpec {
    pub fn startup_s(&self) -> f64 {
        self.stages.iter().map(|s| s.duration_s).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub services: Vec<ServiceSpec>,
    pub manager_processing_s: f64,
    pub sink_service: String,
}

impl DeploymentPlan {
    pub fn validate(&self) -> Result<(), OrchestrationError> {
        if !(self.manager_processing_s >= 0.0) || !self.manager_processing_s.is_finite() {
            return Err(OrchestrationError::InvalidManagerProcessing(
                self.manager_processing_s,
            ));
        }
        let mut names = BTreeSet::new();
        for svc in &self.services {
            if !names.insert(svc.name.as_str()) {
                return Err(OrchestrationError::DuplicateService(svc.name.clone()));
            }
            for st in &svc.stages {
                if !(st.duration_s >= 0.0) || !st.duration_s.is_finite() {
                    return Err(OrchestrationError::InvalidStage {
                        service: svc.name.clone(),
                        label: st.label.clone(),
                        duration_s: st.duration_s,
                    });
                }
            }
        }
        for svc in &self.services {
            if let Some(missing) = svc.requires.iter().find(|r| !names.contains(r.as_str())) {
                return Err(OrchestrationError::UnknownRequirement {
                    service: svc.name.clone(),
                    missing: missing.clone(),
                });
            }
        }
        if !names.contains(self.sink_service.as_str()) {
            return Err(OrchestrationError::UnknownSink(self.sink_service.clone()));
        }
        topological_order(&self.services).map(|_| ())
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }
}

// Kahn's algorithm over `requires` edges; dependencies come first.
fn topological_order(services: &[ServiceSpec]) -> Result<Vec<usize>, OrchestrationError> {
    let index: BTreeMap<&str, usize> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let mut pending: Vec<usize> = services.iter().map(|s| s.requires.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); services.len()];
    for (i, svc) in services.iter().enumerate() {
        for req in &svc.requires {
            if let Some(&j) = index.get(req.as_str()) {
                dependents[j].push(i);
            }
        }
    }
    let mut ready: Vec<usize> = (0..services.len()).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(services.len());
    while let Some(i) = ready.pop() {
        order.push(i);
        for &d in &dependents[i] {
            pending[d] -= 1;
            if pending[d] == 0 {
                ready.push(d);
            }
        }
    }
    if order.len() != services.len() {
        let stuck = (0..services.len())
            .find(|&i| pending[i] > 0)
            .map(|i| services[i].name.clone())
            .unwrap_or_default();
        return Err(OrchestrationError::CyclicDependency(stuck));
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceTiming {
    /// All stages of this service finished.
    pub ready_s: f64,
    /// This service and everything it requires are ready.
    pub usable_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadyTimes {
    pub deploy_start_s: f64,
    pub pipeline_ready_s: f64,
    pub per_service: BTreeMap<String, ServiceTiming>,
}

impl ReadyTimes {
    /// Pipeline readiness measured from the end of manager processing.
    pub fn deployment_latency_s(&self) -> f64 {
        self.pipeline_ready_s - self.deploy_start_s
    }
}

/// When each service, and the pipeline as a whole, becomes usable after a
/// deployment request at `request_time_s`.
pub fn ready_time(
    plan: &DeploymentPlan,
    request_time_s: f64,
) -> Result<ReadyTimes, OrchestrationError> {
    let order = topological_order(&plan.services)?;
    let deploy_start_s = request_time_s + plan.manager_processing_s;
    let mut per_service: BTreeMap<String, ServiceTiming> = BTreeMap::new();
    for i in order {
        let svc = &plan.services[i];
        let ready_s = deploy_start_s + svc.startup_s();
        let usable_s = svc
            .requires
            .iter()
            .filter_map(|r| per_service.get(r))
            .map(|t| t.usable_s)
            .fold(ready_s, f64::max);
        per_service.insert(svc.name.clone(), ServiceTiming { ready_s, usable_s });
    }
    let pipeline_ready_s = per_service
        .get(&plan.sink_service)
        .ok_or_else(|| OrchestrationError::UnknownSink(plan.sink_service.clone()))?
        .usable_s;
    Ok(ReadyTimes {
        deploy_start_s,
        pipeline_ready_s,
        per_service,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Deploying { since: SimTime },
    Active { ready_at: SimTime },
    TearingDown,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Idle => "Idle",
            Phase::Deploying { .. } => "Deploying",
            Phase::Active { .. } => "Active",
            Phase::TearingDown => "TearingDown",
        }
    }

    /// Allowed transitions form the cycle Idle, Deploying, Active, TearingDown.
    pub fn can_transition_to(self, next: Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Idle, Phase::Deploying { .. })
                | (Phase::Deploying { .. }, Phase::Active { .. })
                | (Phase::Active { .. }, Phase::TearingDown)
                | (Phase::TearingDown, Phase::Idle)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrchestratorEvent {
    Request(DeploymentRequest),
    PipelineReady(SimTime),
    CamSeen(SimTime),
    Tick(SimTime),
    TeardownComplete(SimTime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Deploy(DeploymentRequest),
    Teardown { at: SimTime },
}

/// Application-manager state plus the detector bookkeeping that depends on it.
/// All timestamps are on the server clock.
#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorState {
    phase: Phase,
    last_demand: Option<SimTime>,
    idle_timeout: SimTime,
    last_request: Option<SimTime>,
    first_cam_fired: bool,
}

impl OrchestratorState {
    pub fn new(idle_timeout_s: f64) -> Result<Self, OrchestrationError> {
        if !(idle_timeout_s > 0.0) || !idle_timeout_s.is_finite() {
            return Err(OrchestrationError::InvalidIdleTimeout(idle_timeout_s));
        }
        Ok(OrchestratorState {
            phase: Phase::Idle,
            last_demand: None,
            idle_timeout: SimTime::from_secs(idle_timeout_s),
            last_request: None,
            first_cam_fired: false,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn last_demand(&self) -> Option<SimTime> {
        self.last_demand
    }

    pub fn idle_timeout(&self) -> SimTime {
        self.idle_timeout
    }

    /// Earliest time at which a tick can tear the pipeline down.
    pub fn expiry(&self) -> Option<SimTime> {
        self.last_demand
            .map(|t| t + self.idle_timeout + SimTime::from_micros(1))
    }

    fn refresh_demand(&mut self, at: SimTime) {
        self.last_demand = Some(self.last_demand.map_or(at, |t| t.max(at)));
    }

    fn transition(&mut self, next: Phase) {
        assert!(
            self.phase.can_transition_to(next),
            "illegal transition {} -> {}",
            self.phase.name(),
            next.name()
        );
        self.phase = next;
        if next == Phase::Idle {
            self.first_cam_fired = false;
        }
    }

    /// Advances the state machine by one event.
    pub fn step(&mut self, event: OrchestratorEvent) -> Vec<Action> {
        match (self.phase, event) {
            (Phase::Idle, OrchestratorEvent::Request(req)) => {
                self.transition(Phase::Deploying {
                    since: req.requested_at,
                });
                self.refresh_demand(req.requested_at);
                vec![Action::Deploy(req)]
            }
            // at most one deployment in flight; later requests are absorbed
            (_, OrchestratorEvent::Request(req)) => {
                self.refresh_demand(req.requested_at);
                Vec::new()
            }
            (Phase::Deploying { .. }, OrchestratorEvent::PipelineReady(at)) => {
                self.transition(Phase::Active { ready_at: at });
                Vec::new()
            }
            (Phase::Deploying { .. } | Phase::Active { .. }, OrchestratorEvent::CamSeen(at)) => {
                self.refresh_demand(at);
                Vec::new()
            }
            (Phase::Active { .. }, OrchestratorEvent::Tick(now)) => {
                let expired = self.last_demand.is_none_or(|t| now - t > self.idle_timeout);
                if expired {
                    self.transition(Phase::TearingDown);
                    vec![Action::Teardown { at: now }]
                } else {
                    Vec::new()
                }
            }
            (Phase::TearingDown, OrchestratorEvent::TeardownComplete(_)) => {
                self.transition(Phase::Idle);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }
}

/// Applies `rule` to a decoded CAM seen by the detector at `detector_now`.
///
/// Every matching CAM refreshes the demand timestamp; a request is produced
/// at most once per cooldown window, and for `FirstCam` only once until the
/// orchestrator has returned to idle.
pub fn detect(
    rule: &AnalysisRule,
    cam: &CamMessage,
    detector_now: SimTime,
    state: &mut OrchestratorState,
) -> Option<DeploymentRequest> {
    if !rule.matches(cam) {
        return None;
    }
    state.refresh_demand(detector_now);
    let cooled = state
        .last_request
        .is_none_or(|t| detector_now - t >= SimTime::from_secs(rule.cooldown_s));
    if !cooled {
        return None;
    }
    if let Trigger::FirstCam { .. } = rule.trigger {
        if state.first_cam_fired || state.phase != Phase::Idle {
            return None;
        }
        state.first_cam_fired = true;
    }
    state.last_request = Some(detector_now);
    Some(DeploymentRequest {
        requested_at: detector_now,
        triggering_station: cam.station_id,
        triggering_cam_generation_ms: cam.generation_time_ms,
    })
}
