//! Deterministic discrete-event engine.
//!
//! One run wires the scenario's vehicles, channel, detector, application
//! manager and perception pipeline together:
//!
//! ```text
//! vehicle CAM --ITS-G5--> V2X host --uplink--> detector (server)
//!   -> request -> manager processing -> pods + warm-up stages (parallel)
//!   -> pipeline ready -> periodic object lists from each perceiving RSU
//!   -> fusion barrier (server) -> CPM -> downlink -> V2X host --ITS-G5--> vehicle
//! ```
//!
//! All randomness comes from one ChaCha stream seeded by the run seed, so a
//! `(config, seed)` pair always yields the same [`EventLog`].

mod log;
mod queue;
mod vehicle;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use self::log::{first_cpm_latency, EventKind, EventLog, LogError, SimEvent};
pub use self::queue::EventQueue;
pub use self::vehicle::{route_span, vehicle_kinematics, vehicle_position, Kinematics};

use crate::channel::{transmit, ChannelError, ClockModel, Endpoint, MessageKind, NodeId};
use crate::geo::haversine_distance;
use crate::orchestration::{
    detect, ready_time, Action, OrchestrationError, OrchestratorEvent, OrchestratorState, Phase,
};
use crate::scenario::{ScenarioConfig, ScenarioError};
use crate::time::SimTime;
use crate::v2x::{
    build_cpm, decode_cam, encode_cam, encode_cpm, CamMessage, ObjectClass, PerceivedObject,
    V2xError, MAX_CPM_OBJECTS,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    InvalidScenario(#[from] ScenarioError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("orchestration: {0}")]
    Orchestration(#[from] OrchestrationError),
    #[error("message: {0}")]
    Message(#[from] V2xError),
}

#[derive(Debug, Clone)]
enum Pending {
    VehicleCam {
        vehicle: usize,
    },
    CamArrival {
        bytes: Vec<u8>,
        cause: u64,
    },
    CamAtDetector {
        bytes: Vec<u8>,
        cause: u64,
    },
    ManagerDone {
        cause: u64,
        epoch: u64,
    },
    StageDone {
        service: usize,
        stage: Option<usize>,
        cause: u64,
        epoch: u64,
    },
    PipelineReady {
        cause: u64,
        epoch: u64,
    },
    ObjectListEmit {
        rsu: usize,
        cycle: u64,
        cause: u64,
        epoch: u64,
    },
    ObjectListArrival {
        cycle: u64,
        cause: u64,
        epoch: u64,
    },
    Fusion {
        cause: u64,
        epoch: u64,
    },
    CpmAtHost {
        bytes: Vec<u8>,
        cause: u64,
    },
    CpmArrival {
        vehicle: usize,
        bytes: Vec<u8>,
        cause: u64,
    },
    Tick,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    clocks: ClockModel,
    rng: ChaCha8Rng,
    queue: EventQueue<Pending>,
    log: EventLog,
    orchestrator: OrchestratorState,
    host: usize,
    perception: Vec<usize>,
    server: NodeId,
    vehicle_nodes: Vec<NodeId>,
    // deployment generation; pending pipeline events from an earlier one are dropped
    epoch: u64,
    live: bool,
    pipeline_ready_seq: Option<u64>,
    barrier: BTreeMap<u64, usize>,
    tick_at: Option<SimTime>,
    end: SimTime,
}

/// Runs `config` to `end_time_s` with the given seed.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<EventLog, SimError> {
    config.validate()?;
    let host = config
        .rsus
        .iter()
        .position(|r| r.hosts_v2x)
        .expect("validated");
    let mut engine = Engine {
        cfg: config,
        clocks: config.resolve_clocks(seed),
        rng: ChaCha8Rng::seed_from_u64(seed),
        queue: EventQueue::new(),
        log: EventLog::new(),
        orchestrator: OrchestratorState::new(config.idle_timeout_s)?,
        host,
        perception: config.perception_rsus(),
        server: NodeId::server(),
        vehicle_nodes: config.vehicles.iter().map(|v| v.node_id()).collect(),
        epoch: 0,
        live: false,
        pipeline_ready_seq: None,
        barrier: BTreeMap::new(),
        tick_at: None,
        end: SimTime::from_secs(config.end_time_s),
    };
    engine.run()?;
    Ok(engine.log)
}

fn ms(v: f64) -> SimTime {
    SimTime::from_ms(v)
}

impl Engine<'_> {
    fn run(&mut self) -> Result<(), SimError> {
        for (i, v) in self.cfg.vehicles.iter().enumerate() {
            let (start, _) = route_span(v);
            self.queue.push(
                SimTime::from_secs(start),
                Pending::VehicleCam { vehicle: i },
            );
        }
        while let Some((now, _, item)) = self.queue.pop() {
            if now > self.end {
                break;
            }
            self.handle(now, item)?;
        }
        Ok(())
    }

    fn local(&self, node: &NodeId, now: SimTime) -> SimTime {
        // every node of the scenario is present in the resolved clock model
        now + self.clocks.offset(node).expect("resolved clock")
    }

    fn record(
        &mut self,
        now: SimTime,
        kind: EventKind,
        node: NodeId,
        payload: Option<Vec<u8>>,
        cause: Option<u64>,
        label: Option<String>,
    ) -> u64 {
        let local = self.local(&node, now);
        self.log.push(now, kind, node, local, payload, cause, label)
    }

    fn is_current(&self, epoch: u64) -> bool {
        self.live && epoch == self.epoch
    }

    fn handle(&mut self, now: SimTime, item: Pending) -> Result<(), SimError> {
        let cfg = self.cfg;
        let lat = &cfg.other_latencies;
        match item {
            Pending::VehicleCam { vehicle } => self.vehicle_cam(now, vehicle)?,
            Pending::CamArrival { bytes, cause } => {
                let host = cfg.rsus[self.host].id.clone();
                let seq = self.record(
                    now,
                    EventKind::CamDelivered,
                    host,
                    Some(bytes.clone()),
                    Some(cause),
                    None,
                );
                let at = now + ms(cfg.uplink_latency_ms) + ms(lat.event_detection_ms);
                self.queue
                    .push(at, Pending::CamAtDetector { bytes, cause: seq });
            }
            Pending::CamAtDetector { bytes, cause } => {
                let cam = decode_cam(&bytes)?;
                let server_now = self.local(&self.server, now);
                let Some(request) = detect(&cfg.rule, &cam, server_now, &mut self.orchestrator)
                else {
                    return Ok(());
                };
                let seq = self.record(
                    now,
                    EventKind::RequestIssued,
                    self.server.clone(),
                    Some(bytes),
                    Some(cause),
                    None,
                );
                for action in self.orchestrator.step(OrchestratorEvent::Request(request)) {
                    if let Action::Deploy(_) = action {
                        self.epoch += 1;
                        self.live = true;
                        self.pipeline_ready_seq = None;
                        self.barrier.clear();
                        let at = now + SimTime::from_secs(cfg.plan.manager_processing_s);
                        self.queue.push(
                            at,
                            Pending::ManagerDone {
                                cause: seq,
                                epoch: self.epoch,
                            },
                        );
                    }
                }
            }
            Pending::ManagerDone { cause, epoch } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let seq = self.record(
                    now,
                    EventKind::ManagerDone,
                    self.server.clone(),
                    None,
                    Some(cause),
                    None,
                );
                self.schedule_deployment(now, seq, epoch)?;
            }
            Pending::StageDone {
                service,
                stage,
                cause,
                epoch,
            } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let svc = &cfg.plan.services[service];
                let (kind, label) = match stage {
                    None => (EventKind::PodCreated, svc.name.clone()),
                    Some(k) => (
                        if k == 0 {
                            EventKind::PodCreated
                        } else {
                            EventKind::StageCompleted
                        },
                        format!("{}/{}", svc.name, svc.stages[k].label),
                    ),
                };
                self.record(now, kind, svc.node.clone(), None, Some(cause), Some(label));
            }
            Pending::PipelineReady { cause, epoch } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let sink = cfg
                    .plan
                    .service(&cfg.plan.sink_service)
                    .expect("validated sink");
                let seq = self.record(
                    now,
                    EventKind::PipelineReady,
                    sink.node.clone(),
                    None,
                    Some(cause),
                    Some(sink.name.clone()),
                );
                self.pipeline_ready_seq = Some(seq);
                let server_now = self.local(&self.server, now);
                self.orchestrator
                    .step(OrchestratorEvent::PipelineReady(server_now));
                for &rsu in &self.perception.clone() {
                    self.queue.push(
                        now,
                        Pending::ObjectListEmit {
                            rsu,
                            cycle: 0,
                            cause: seq,
                            epoch,
                        },
                    );
                }
                self.schedule_tick(now);
            }
            Pending::ObjectListEmit {
                rsu,
                cycle,
                cause,
                epoch,
            } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let seq = self.record(
                    now,
                    EventKind::ObjectListSent,
                    cfg.rsus[rsu].id.clone(),
                    None,
                    Some(cause),
                    Some(format!("cycle {cycle}")),
                );
                self.queue.push(
                    now + ms(lat.object_list_uplink_ms),
                    Pending::ObjectListArrival {
                        cycle,
                        cause: seq,
                        epoch,
                    },
                );
                self.queue.push(
                    now + ms(cfg.fusion_period_ms),
                    Pending::ObjectListEmit {
                        rsu,
                        cycle: cycle + 1,
                        cause,
                        epoch,
                    },
                );
            }
            Pending::ObjectListArrival {
                cycle,
                cause,
                epoch,
            } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let seq = self.record(
                    now,
                    EventKind::ObjectListDelivered,
                    self.server.clone(),
                    None,
                    Some(cause),
                    Some(format!("cycle {cycle}")),
                );
                let arrived = self.barrier.entry(cycle).or_insert(0);
                *arrived += 1;
                if *arrived == self.perception.len() {
                    self.barrier.remove(&cycle);
                    self.queue.push(
                        now + ms(lat.fusion_processing_ms),
                        Pending::Fusion { cause: seq, epoch },
                    );
                }
            }
            Pending::Fusion { cause, epoch } => {
                if !self.is_current(epoch) {
                    return Ok(());
                }
                let seq = self.record(
                    now,
                    EventKind::FusionDone,
                    self.server.clone(),
                    None,
                    Some(cause),
                    None,
                );
                let generated = now + ms(lat.cpm_generation_ms);
                let bytes = self.build_cpm_bytes(generated)?;
                self.queue.push(
                    generated + ms(lat.cpm_downlink_ms),
                    Pending::CpmAtHost { bytes, cause: seq },
                );
            }
            Pending::CpmAtHost { bytes, cause } => {
                let host = &cfg.rsus[self.host];
                let seq = self.record(
                    now,
                    EventKind::CpmBroadcast,
                    host.id.clone(),
                    Some(bytes.clone()),
                    Some(cause),
                    None,
                );
                for (i, v) in cfg.vehicles.iter().enumerate() {
                    let Ok(kin) = vehicle_kinematics(v, now.as_secs()) else {
                        continue;
                    };
                    let delivery = transmit(
                        &bytes,
                        MessageKind::Cpm,
                        Endpoint {
                            node: &host.id,
                            position: host.position,
                        },
                        Endpoint {
                            node: &self.vehicle_nodes[i],
                            position: kin.position,
                        },
                        now,
                        &cfg.channel,
                        &mut self.rng,
                    )?;
                    if let Some(d) = delivery {
                        self.queue.push(
                            d.arrival_time,
                            Pending::CpmArrival {
                                vehicle: i,
                                bytes: d.payload,
                                cause: seq,
                            },
                        );
                    }
                }
            }
            Pending::CpmArrival {
                vehicle,
                bytes,
                cause,
            } => {
                let node = self.vehicle_nodes[vehicle].clone();
                self.record(
                    now,
                    EventKind::CpmDelivered,
                    node,
                    Some(bytes),
                    Some(cause),
                    None,
                );
            }
            Pending::Tick => {
                if self.tick_at != Some(now) {
                    return Ok(());
                }
                self.tick_at = None;
                let server_now = self.local(&self.server, now);
                let actions = self.orchestrator.step(OrchestratorEvent::Tick(server_now));
                if actions.iter().any(|a| matches!(a, Action::Teardown { .. })) {
                    self.record(
                        now,
                        EventKind::Teardown,
                        self.server.clone(),
                        None,
                        self.pipeline_ready_seq,
                        None,
                    );
                    self.live = false;
                    self.barrier.clear();
                    self.orchestrator
                        .step(OrchestratorEvent::TeardownComplete(server_now));
                } else {
                    self.schedule_tick(now);
                }
            }
        }
        Ok(())
    }

    fn vehicle_cam(&mut self, now: SimTime, vehicle: usize) -> Result<(), SimError> {
        let cfg = self.cfg;
        let agent = &cfg.vehicles[vehicle];
        let (_, span_end) = route_span(agent);
        let t = now.as_secs();
        if t > span_end {
            return Ok(());
        }
        let kin = vehicle_kinematics(agent, t).map_err(|_| ScenarioError::Invalid {
            field: format!("vehicles[{vehicle}].route"),
            message: format!("no position at t = {t} s"),
        })?;
        let node = self.vehicle_nodes[vehicle].clone();
        let local = self.local(&node, now);
        let cam = CamMessage::new(
            agent.station_id,
            epoch_ms(cfg.epoch_start_ms, local),
            kin.position,
            kin.speed_cms(),
            kin.heading_ddeg(),
        )?;
        let bytes = encode_cam(&cam);
        let seq = self.record(
            now,
            EventKind::CamGenerated,
            node.clone(),
            Some(bytes.clone()),
            None,
            None,
        );
        let host = &cfg.rsus[self.host];
        let delivery = transmit(
            &bytes,
            MessageKind::Cam,
            Endpoint {
                node: &node,
                position: kin.position,
            },
            Endpoint {
                node: &host.id,
                position: host.position,
            },
            now,
            &cfg.channel,
            &mut self.rng,
        )?;
        if let Some(d) = delivery {
            self.queue.push(
                d.arrival_time,
                Pending::CamArrival {
                    bytes: d.payload,
                    cause: seq,
                },
            );
        }
        let next = now + SimTime::from_micros(agent.cam_period_ms as i64 * 1_000);
        self.queue.push(next, Pending::VehicleCam { vehicle });
        Ok(())
    }

    fn schedule_deployment(
        &mut self,
        now: SimTime,
        cause: u64,
        epoch: u64,
    ) -> Result<(), SimError> {
        let plan = &self.cfg.plan;
        let rt = ready_time(plan, 0.0)?;
        for (i, svc) in plan.services.iter().enumerate() {
            if svc.stages.is_empty() {
                self.queue.push(
                    now,
                    Pending::StageDone {
                        service: i,
                        stage: None,
                        cause,
                        epoch,
                    },
                );
            }
            let mut elapsed = 0.0;
            for k in 0..svc.stages.len() {
                elapsed += svc.stages[k].duration_s;
                self.queue.push(
                    now + SimTime::from_secs(elapsed),
                    Pending::StageDone {
                        service: i,
                        stage: Some(k),
                        cause,
                        epoch,
                    },
                );
            }
        }
        self.queue.push(
            now + SimTime::from_secs(rt.deployment_latency_s()),
            Pending::PipelineReady { cause, epoch },
        );
        Ok(())
    }

    fn schedule_tick(&mut self, now: SimTime) {
        if !matches!(self.orchestrator.phase(), Phase::Active { .. }) {
            return;
        }
        let Some(expiry_local) = self.orchestrator.expiry() else {
            return;
        };
        let server_offset = self.local(&self.server, SimTime::ZERO);
        let at = (expiry_local - server_offset).max(now);
        self.tick_at = Some(at);
        self.queue.push(at, Pending::Tick);
    }

    fn build_cpm_bytes(&self, at: SimTime) -> Result<Vec<u8>, SimError> {
        let cfg = self.cfg;
        let mut objects = Vec::new();
        for (i, v) in cfg.vehicles.iter().enumerate() {
            if objects.len() == MAX_CPM_OBJECTS {
                break;
            }
            let Ok(kin) = vehicle_kinematics(v, at.as_secs()) else {
                continue;
            };
            let seen = self.perception.iter().any(|&r| {
                haversine_distance(cfg.rsus[r].position, kin.position) <= cfg.sensor_range_m
            });
            if seen {
                objects.push(PerceivedObject {
                    object_id: i as u16,
                    position: kin.position,
                    speed_cms: kin.speed_cms(),
                    heading_ddeg: kin.heading_ddeg(),
                    object_class: ObjectClass::PassengerCar,
                });
            }
        }
        let local = self.local(&self.server, at);
        let cpm = build_cpm(
            objects,
            cfg.rsus[self.host].station_id,
            epoch_ms(cfg.epoch_start_ms, local),
        )?;
        Ok(encode_cpm(&cpm))
    }
}

fn epoch_ms(epoch_start_ms: u64, local: SimTime) -> u64 {
    let ms = local.as_micros().div_euclid(1_000);
    (epoch_start_ms as i64 + ms).max(0) as u64
}
