//! Vehicle kinematics.

use crate::geo::{destination, GeoError, LocalFrame};
use crate::scenario::{Route, VehicleAgent};
use crate::v2x::GeoPosition;

/// Instantaneous state used to fill a CAM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: GeoPosition,
    pub speed_mps: f64,
    /// Degrees clockwise from north.
    pub heading_deg: f64,
}

impl Kinematics {
    pub fn speed_cms(&self) -> u16 {
        (self.speed_mps * 100.0)
            .round()
            .clamp(0.0, crate::v2x::MAX_SPEED_CMS as f64) as u16
    }

    pub fn heading_ddeg(&self) -> u16 {
        ((self.heading_deg.rem_euclid(360.0) * 10.0).round() as u16) % 3600
    }
}

/// Time span during which the vehicle exists. Approaches start at 0 and
/// hold at the target forever.
pub fn route_span(agent: &VehicleAgent) -> (f64, f64) {
    match &agent.route {
        Route::Approach { .. } => (0.0, f64::INFINITY),
        Route::Waypoints(points) => (points[0].t_s, points[points.len() - 1].t_s),
    }
}

pub fn vehicle_position(agent: &VehicleAgent, t_s: f64) -> Result<GeoPosition, GeoError> {
    vehicle_kinematics(agent, t_s).map(|k| k.position)
}

pub fn vehicle_kinematics(agent: &VehicleAgent, t_s: f64) -> Result<Kinematics, GeoError> {
    match &agent.route {
        Route::Approach {
            bearing_deg,
            start_distance_m,
            speed_kmh,
            target,
        } => {
            let t = t_s.max(0.0);
            let speed = speed_kmh / 3.6;
            let remaining = (start_distance_m - speed * t).max(0.0);
            let position = destination(*target, *bearing_deg, remaining)
                .ok_or(GeoError::TimeOutOfRange(t_s))?;
            Ok(Kinematics {
                position,
                speed_mps: if remaining > 0.0 { speed } else { 0.0 },
                heading_deg: (bearing_deg + 180.0).rem_euclid(360.0),
            })
        }
        Route::Waypoints(points) => {
            let (first, last) = (points[0], points[points.len() - 1]);
            if t_s < first.t_s || t_s > last.t_s {
                return Err(GeoError::TimeOutOfRange(t_s));
            }
            if points.len() == 1 {
                return Ok(Kinematics {
                    position: first.position,
                    speed_mps: 0.0,
                    heading_deg: 0.0,
                });
            }
            let i = points
                .windows(2)
                .position(|w| t_s <= w[1].t_s)
                .expect("t_s is within the span");
            let (a, b) = (points[i], points[i + 1]);
            let frame = LocalFrame::new(a.position);
            let (x, y) = frame.to_xy(b.position);
            let frac = (t_s - a.t_s) / (b.t_s - a.t_s);
            let position = frame
                .from_xy(x * frac, y * frac)
                .ok_or(GeoError::TimeOutOfRange(t_s))?;
            Ok(Kinematics {
                position,
                speed_mps: (x * x + y * y).sqrt() / (b.t_s - a.t_s),
                heading_deg: x.atan2(y).to_degrees().rem_euclid(360.0),
            })
        }
    }
}
