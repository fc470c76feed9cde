//! ITS-G5 broadcast channel and per-node clocks.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine_distance;
use crate::time::SimTime;
use crate::v2x::GeoPosition;

pub const DEFAULT_RANGE_M: f64 = 800.0;

// After this many rejected draws the window is narrow relative to the
// spread, where the truncated density is flat; fall back to uniform.
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("invalid latency distribution: {0}")]
    InvalidDistribution(String),
    #[error("zero-variance distribution with mean {mean_ms} outside [{min_ms}, {max_ms}]")]
    DegenerateDistribution {
        mean_ms: f64,
        min_ms: f64,
        max_ms: f64,
    },
    #[error("loss probability {0} outside [0, 1]")]
    InvalidLossProbability(f64),
    #[error("range must be non-negative, got {0}")]
    InvalidRange(f64),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Identifies a vehicle, roadside unit or the server.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn server() -> Self {
        NodeId::new("server")
    }

    /// Node id used for the vehicle broadcasting as `station`.
    pub fn vehicle(station: u32) -> Self {
        NodeId(format!("vehicle-{station}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Truncated normal latency, parameterised by its observed statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyDistribution {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyDistribution {
    /// CAM, vehicle to roadside unit, as measured in the test field.
    pub const CAM_ITS_G5: LatencyDistribution = LatencyDistribution {
        mean_ms: 8.17,
        std_ms: 2.23,
        min_ms: 3.22,
        max_ms: 22.91,
    };

    /// CPM, roadside unit to vehicle.
    pub const CPM_ITS_G5: LatencyDistribution = LatencyDistribution {
        mean_ms: 5.25,
        std_ms: 2.29,
        min_ms: 0.19,
        max_ms: 11.79,
    };

    pub fn new(mean_ms: f64, std_ms: f64, min_ms: f64, max_ms: f64) -> Result<Self, ChannelError> {
        let d = LatencyDistribution {
            mean_ms,
            std_ms,
            min_ms,
            max_ms,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn constant(ms: f64) -> Self {
        LatencyDistribution {
            mean_ms: ms,
            std_ms: 0.0,
            min_ms: ms,
            max_ms: ms,
        }
    }

    /// Same bounds and mean with the spread removed.
    pub fn zero_variance(self) -> Self {
        LatencyDistribution {
            std_ms: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let all = [self.mean_ms, self.std_ms, self.min_ms, self.max_ms];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ChannelError::InvalidDistribution(
                "non-finite parameter".into(),
            ));
        }
        if self.std_ms < 0.0 || self.min_ms < 0.0 {
            return Err(ChannelError::InvalidDistribution(
                "std_ms and min_ms must be non-negative".into(),
            ));
        }
        if self.min_ms > self.max_ms {
            return Err(ChannelError::InvalidDistribution(format!(
                "min_ms {} > max_ms {}",
                self.min_ms, self.max_ms
            )));
        }
        if self.mean_ms < self.min_ms || self.mean_ms > self.max_ms {
            return Err(ChannelError::DegenerateDistribution {
                mean_ms: self.mean_ms,
                min_ms: self.min_ms,
                max_ms: self.max_ms,
            });
        }
        Ok(())
    }
}

/// Draws a latency in milliseconds from `Normal(mean, std)` restricted to
/// `[min, max]` by rejection.
pub fn sample_latency<R: Rng + ?Sized>(
    dist: &LatencyDistribution,
    rng: &mut R,
) -> Result<f64, ChannelError> {
    if dist.std_ms == 0.0 {
        if dist.mean_ms < dist.min_ms || dist.mean_ms > dist.max_ms || !dist.mean_ms.is_finite() {
            return Err(ChannelError::DegenerateDistribution {
                mean_ms: dist.mean_ms,
                min_ms: dist.min_ms,
                max_ms: dist.max_ms,
            });
        }
        return Ok(dist.mean_ms);
    }
    dist.validate()?;
    if dist.min_ms == dist.max_ms {
        return Ok(dist.min_ms);
    }
    let normal = Normal::new(dist.mean_ms, dist.std_ms)
        .map_err(|e| ChannelError::InvalidDistribution(e.to_string()))?;
    for _ in 0..MAX_REJECTIONS {
        let x = normal.sample(rng);
        if x >= dist.min_ms && x <= dist.max_ms {
            return Ok(x);
        }
    }
    Ok(rng.random_range(dist.min_ms..=dist.max_ms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Cam,
    Cpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub range_m: f64,
    pub cam_latency: LatencyDistribution,
    pub cpm_latency: LatencyDistribution,
    pub loss_probability: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            range_m: DEFAULT_RANGE_M,
            cam_latency: LatencyDistribution::CAM_ITS_G5,
            cpm_latency: LatencyDistribution::CPM_ITS_G5,
            loss_probability: 0.0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.range_m >= 0.0) || !self.range_m.is_finite() {
            return Err(ChannelError::InvalidRange(self.range_m));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(ChannelError::InvalidLossProbability(self.loss_probability));
        }
        self.cam_latency.validate()?;
        self.cpm_latency.validate()
    }

    pub fn latency(&self, kind: MessageKind) -> &LatencyDistribution {
        match kind {
            MessageKind::Cam => &self.cam_latency,
            MessageKind::Cpm => &self.cpm_latency,
        }
    }
}

pub fn in_range(tx: GeoPosition, rx: GeoPosition, model: &ChannelModel) -> bool {
    haversine_distance(tx, rx) <= model.range_m
}

/// One end of a radio transmission.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint<'a> {
    pub node: &'a NodeId,
    pub position: GeoPosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryEvent {
    pub rx_node: NodeId,
    pub arrival_time: SimTime,
    pub payload: Vec<u8>,
}

/// Sends one frame over the broadcast channel. Returns `None` when the
/// receiver is out of range or the frame is lost.
pub fn transmit<R: Rng + ?Sized>(
    msg: &[u8],
    kind: MessageKind,
    tx: Endpoint<'_>,
    rx: Endpoint<'_>,
    send_time: SimTime,
    model: &ChannelModel,
    rng: &mut R,
) -> Result<Option<DeliveryEvent>, ChannelError> {
    if !in_range(tx.position, rx.position, model) {
        return Ok(None);
    }
    if model.loss_probability >= 1.0 {
        return Ok(None);
    }
    if model.loss_probability > 0.0 && rng.random::<f64>() < model.loss_probability {
        return Ok(None);
    }
    let latency = sample_latency(model.latency(kind), rng)?;
    Ok(Some(DeliveryEvent {
        rx_node: rx.node.clone(),
        arrival_time: send_time + SimTime::from_ms(latency),
        payload: msg.to_vec(),
    }))
}

/// Constant per-node clock offsets (node clock minus true time), in ms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub offsets_ms: BTreeMap<NodeId, f64>,
}

impl ClockModel {
    pub fn with_offsets<I: IntoIterator<Item = (NodeId, f64)>>(offsets: I) -> Self {
        ClockModel {
            offsets_ms: offsets.into_iter().collect(),
        }
    }

    pub fn offset(&self, node: &NodeId) -> Result<SimTime, ChannelError> {
        self.offsets_ms
            .get(node)
            .map(|&ms| SimTime::from_ms(ms))
            .ok_or_else(|| ChannelError::UnknownNode(node.clone()))
    }
}

/// Reads `node`'s clock at true time `true_time`.
pub fn node_clock(
    clock: &ClockModel,
    node: &NodeId,
    true_time: SimTime,
) -> Result<SimTime, ChannelError> {
    Ok(true_time + clock.offset(node)?)
}
