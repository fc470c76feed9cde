//! The event log produced by a simulation run and its line-delimited JSON form.
//!
//! One JSON object per line, keys always in this order:
//!
//! | key             | type            | meaning                                           |
//! |-----------------|-----------------|---------------------------------------------------|
//! | `time_true_ms`  | number          | true simulation time, ms (µs resolution)          |
//! | `seq`           | integer         | position in the log, starting at 0                |
//! | `kind`          | string          | [`EventKind`] name                                |
//! | `node`          | string          | node where the event happened                     |
//! | `node_local_ms` | number          | the same instant on that node's clock             |
//! | `payload`       | string or null  | hex of the CAM/CPM wire bytes involved            |
//! | `causation_seq` | integer or null | `seq` of the event that caused this one           |
//! | `label`         | string or null  | service/stage name for deployment events          |

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::NodeId;
use crate::time::SimTime;
use crate::v2x::{decode_cam, StationId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    CamGenerated,
    CamDelivered,
    RequestIssued,
    ManagerDone,
    PodCreated,
    StageCompleted,
    PipelineReady,
    ObjectListSent,
    ObjectListDelivered,
    FusionDone,
    CpmBroadcast,
    CpmDelivered,
    Teardown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time_true: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub node: NodeId,
    pub node_local: SimTime,
    pub payload: Option<Vec<u8>>,
    pub causation_seq: Option<u64>,
    pub label: Option<String>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("no CAM from station {0} reached the V2X host")]
    NoCamDelivered(StationId),
    #[error("station {0} never received a CPM")]
    NoCpmReceived(StationId),
    #[error("event log line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Append-only, time-ordered record of a run. `events[i].seq == i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<SimEvent>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    time_true_ms: f64,
    seq: u64,
    kind: EventKind,
    node: NodeId,
    node_local_ms: f64,
    payload: Option<String>,
    causation_seq: Option<u64>,
    label: Option<String>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        time_true: SimTime,
        kind: EventKind,
        node: NodeId,
        node_local: SimTime,
        payload: Option<Vec<u8>>,
        causation_seq: Option<u64>,
        label: Option<String>,
    ) -> u64 {
        debug_assert!(self.events.last().is_none_or(|e| e.time_true <= time_true));
        let seq = self.events.len() as u64;
        self.events.push(SimEvent {
            time_true,
            seq,
            kind,
            node,
            node_local,
            payload,
            causation_seq,
            label,
        });
        seq
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&SimEvent> {
        self.events.get(seq as usize)
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    /// Walks causation links from `seq` back to a root event.
    pub fn causal_chain(&self, seq: u64) -> Vec<&SimEvent> {
        let mut chain = Vec::new();
        let mut cur = self.get(seq);
        while let Some(ev) = cur {
            chain.push(ev);
            cur = ev.causation_seq.and_then(|c| self.get(c));
        }
        chain
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ev in &self.events {
            let rec = EventRecord {
                time_true_ms: ev.time_true.as_ms(),
                seq: ev.seq,
                kind: ev.kind,
                node: ev.node.clone(),
                node_local_ms: ev.node_local.as_ms(),
                payload: ev.payload.as_ref().map(hex::encode),
                causation_seq: ev.causation_seq,
                label: ev.label.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, LogError> {
        let mut log = EventLog::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| LogError::Parse {
                line: lineno,
                message,
            };
            let rec: EventRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if rec.seq != log.events.len() as u64 {
                return Err(err(format!("expected seq {}", log.events.len())));
            }
            let payload = rec
                .payload
                .map(|h| hex::decode(h).map_err(|e| err(e.to_string())))
                .transpose()?;
            log.events.push(SimEvent {
                time_true: SimTime::from_ms(rec.time_true_ms),
                seq: rec.seq,
                kind: rec.kind,
                node: rec.node,
                node_local: SimTime::from_ms(rec.node_local_ms),
                payload,
                causation_seq: rec.causation_seq,
                label: rec.label,
            });
        }
        Ok(log)
    }

    /// The first CAM from `station` that reached the V2X host, paired with the
    /// `CamGenerated` event that produced it.
    pub fn first_delivered_cam(&self, station: StationId) -> Option<(&SimEvent, &SimEvent)> {
        self.of_kind(EventKind::CamDelivered).find_map(|ev| {
            let cam = decode_cam(ev.payload.as_deref()?).ok()?;
            if cam.station_id != station {
                return None;
            }
            let generated = self.get(ev.causation_seq?)?;
            (generated.kind == EventKind::CamGenerated).then_some((generated, ev))
        })
    }
}

/// End-to-end latency seen by the vehicle: its own clock at the first CPM
/// reception minus its own clock when it generated the first CAM that
/// reached the V2X host. Clock offsets cancel.
pub fn first_cpm_latency(log: &EventLog, station: StationId) -> Result<f64, LogError> {
    let (generated, _) = log
        .first_delivered_cam(station)
        .ok_or(LogError::NoCamDelivered(station))?;
    let vehicle = NodeId::vehicle(station.get());
    let cpm = log
        .of_kind(EventKind::CpmDelivered)
        .find(|e| e.node == vehicle && e.time_true >= generated.time_true)
        .ok_or(LogError::NoCpmReceived(station))?;
    Ok((cpm.node_local - generated.node_local).as_secs())
}
