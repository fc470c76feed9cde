//! Geodesy on a spherical earth, geofences, trajectory aggregation and
//! approach-route classification.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::v2x::{CamMessage, GeoPosition, StationId};

/// Mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Default gap that splits one station's CAM stream into separate trajectories.
pub const DEFAULT_GAP_SPLIT_S: f64 = 30.0;

// Points closer than this to a polygon edge count as on the boundary.
const BOUNDARY_EPS_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("circle radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon must not repeat its first vertex at the end")]
    ClosedPolygon,
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("trajectory has no points")]
    EmptyTrajectory,
    #[error("time {0} s lies outside the route span")]
    TimeOutOfRange(f64),
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPosition, b: GeoPosition) -> f64 {
    let (lat1, lon1) = (a.lat_deg().to_radians(), a.lon_deg().to_radians());
    let (lat2, lon2) = (b.lat_deg().to_radians(), b.lon_deg().to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `from` to `to`, degrees clockwise from north in [0, 360).
pub fn initial_bearing_deg(from: GeoPosition, to: GeoPosition) -> f64 {
    let (lat1, lon1) = (from.lat_deg().to_radians(), from.lon_deg().to_radians());
    let (lat2, lon2) = (to.lat_deg().to_radians(), to.lon_deg().to_radians());
    let dlon = lon2 - lon1;
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let deg = y.atan2(x).to_degrees();
    let norm = deg.rem_euclid(360.0);
    if norm >= 360.0 {
        0.0
    } else {
        norm
    }
}

/// Point reached by travelling `distance_m` from `origin` along `bearing_deg`.
/// Returns `None` when the result cannot be represented as a [`GeoPosition`].
pub fn destination(origin: GeoPosition, bearing_deg: f64, distance_m: f64) -> Option<GeoPosition> {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let lat1 = origin.lat_deg().to_radians();
    let lon1 = origin.lon_deg().to_radians();
    let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos()).asin();
    let lon2 = lon1
        + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * lat2.sin());
    let lon_deg = (lon2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPosition::from_degrees(lat2.to_degrees(), lon_deg).ok()
}

/// Equirectangular projection about a fixed origin, in meters (east, north).
/// Accurate to well under a meter over a few kilometres.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    lat0_deg: f64,
    lon0_deg: f64,
    cos_lat0: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPosition) -> Self {
        LocalFrame {
            lat0_deg: origin.lat_deg(),
            lon0_deg: origin.lon_deg(),
            cos_lat0: origin.lat_deg().to_radians().cos(),
        }
    }

    fn at_degrees(lat0_deg: f64, lon0_deg: f64) -> Self {
        LocalFrame {
            lat0_deg,
            lon0_deg,
            cos_lat0: lat0_deg.to_radians().cos(),
        }
    }

    pub fn to_xy(&self, p: GeoPosition) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let x = (p.lon_deg() - self.lon0_deg) * self.cos_lat0 * k;
        let y = (p.lat_deg() - self.lat0_deg) * k;
        (x, y)
    }

    pub fn from_xy(&self, x: f64, y: f64) -> Option<GeoPosition> {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let lat = self.lat0_deg + y / k;
        let lon = self.lon0_deg + x / (k * self.cos_lat0);
        GeoPosition::from_degrees(lat, lon).ok()
    }
}

/// A closed geographic region. Boundary points are inside.
#[derive(Debug, Clone, PartialEq)]
pub enum Geofence {
    Circle { center: GeoPosition, radius_m: f64 },
    Polygon { vertices: Vec<GeoPosition> },
}

impl Geofence {
    pub fn circle(center: GeoPosition, radius_m: f64) -> Result<Self, GeoError> {
        if !(radius_m > 0.0) || !radius_m.is_finite() {
            return Err(GeoError::NonPositiveRadius(radius_m));
        }
        Ok(Geofence::Circle { center, radius_m })
    }

    pub fn polygon(vertices: Vec<GeoPosition>) -> Result<Self, GeoError> {
        if vertices.len() < 3 {
            return Err(GeoError::TooFewVertices(vertices.len()));
        }
        if vertices.first() == vertices.last() {
            return Err(GeoError::ClosedPolygon);
        }
        let frame = polygon_frame(&vertices);
        let pts: Vec<_> = vertices.iter().map(|&v| frame.to_xy(v)).collect();
        let n = pts.len();
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return Err(GeoError::SelfIntersecting(i, j));
                }
            }
        }
        Ok(Geofence::Polygon { vertices })
    }

    pub fn contains(&self, p: GeoPosition) -> bool {
        geofence_contains(self, p)
    }
}

fn polygon_frame(vertices: &[GeoPosition]) -> LocalFrame {
    let n = vertices.len() as f64;
    let lat = vertices.iter().map(|v| v.lat_deg()).sum::<f64>() / n;
    let lon = vertices.iter().map(|v| v.lon_deg()).sum::<f64>() / n;
    LocalFrame::at_degrees(lat, lon)
}

type Xy = (f64, f64);

fn cross(o: Xy, a: Xy, b: Xy) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: Xy, a: Xy, b: Xy) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(a: Xy, b: Xy, c: Xy, d: Xy) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

fn distance_to_segment(p: Xy, a: Xy, b: Xy) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

pub fn geofence_contains(fence: &Geofence, p: GeoPosition) -> bool {
    match fence {
        Geofence::Circle { center, radius_m } => haversine_distance(*center, p) <= *radius_m,
        Geofence::Polygon { vertices } => {
            let frame = polygon_frame(vertices);
            let pts: Vec<_> = vertices.iter().map(|&v| frame.to_xy(v)).collect();
            let q = frame.to_xy(p);
            let n = pts.len();
            if (0..n).any(|i| distance_to_segment(q, pts[i], pts[(i + 1) % n]) <= BOUNDARY_EPS_M) {
                return true;
            }
            // even-odd ray cast towards +x
            let mut inside = false;
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > q.1) != (yj > q.1) {
                    let x_cross = xi + (q.1 - yi) * (xj - xi) / (yj - yi);
                    if q.0 < x_cross {
                        inside = !inside;
                    }
                }
                j = i;
            }
            inside
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryPoint {
    pub time_ms: u64,
    pub position: GeoPosition,
    pub speed_cms: u16,
    pub heading_ddeg: u16,
}

impl From<&CamMessage> for TrajectoryPoint {
    fn from(cam: &CamMessage) -> Self {
        TrajectoryPoint {
            time_ms: cam.generation_time_ms,
            position: cam.position,
            speed_cms: cam.speed_cms,
            heading_ddeg: cam.heading_ddeg,
        }
    }
}

/// A strictly time-ordered run of points from one station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub station_id: StationId,
    pub points: Vec<TrajectoryPoint>,
}

/// Groups CAMs by station and splits each station's stream wherever consecutive
/// CAMs are more than `gap_split_s` apart. A repeated timestamp also starts a
/// new trajectory so that every trajectory stays strictly increasing.
///
/// Output is ordered by (first point time, station id).
pub fn aggregate_trajectories(cams: &[CamMessage], gap_split_s: f64) -> Vec<Trajectory> {
    let gap_ms = gap_split_s * 1_000.0;
    let mut sorted: Vec<&CamMessage> = cams.iter().collect();
    sorted.sort_by_key(|c| c.generation_time_ms);

    let mut open: BTreeMap<StationId, Trajectory> = BTreeMap::new();
    let mut done = Vec::new();
    for cam in sorted {
        let point = TrajectoryPoint::from(cam);
        match open.get_mut(&cam.station_id) {
            Some(traj) => {
                let last = traj.points.last().expect("open trajectories are non-empty");
                let gap = point.time_ms.saturating_sub(last.time_ms);
                if point.time_ms <= last.time_ms || gap as f64 > gap_ms {
                    let finished = std::mem::replace(
                        traj,
                        Trajectory {
                            station_id: cam.station_id,
                            points: vec![point],
                        },
                    );
                    done.push(finished);
                } else {
                    traj.points.push(point);
                }
            }
            None => {
                open.insert(
                    cam.station_id,
                    Trajectory {
                        station_id: cam.station_id,
                        points: vec![point],
                    },
                );
            }
        }
    }
    done.extend(open.into_values());
    done.sort_by_key(|t| (t.points[0].time_ms, t.station_id));
    done
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouteClass {
    FromNorth,
    FromEast,
    FromSouth,
    FromWest,
    Irrelevant,
}

impl RouteClass {
    pub const ALL: [RouteClass; 5] = [
        RouteClass::FromNorth,
        RouteClass::FromEast,
        RouteClass::FromSouth,
        RouteClass::FromWest,
        RouteClass::Irrelevant,
    ];

    /// Bucket a bearing measured from the intersection towards the vehicle.
    pub fn from_bearing(bearing_deg: f64) -> Self {
        let b = bearing_deg.rem_euclid(360.0);
        if !(45.0..315.0).contains(&b) {
            RouteClass::FromNorth
        } else if b < 135.0 {
            RouteClass::FromEast
        } else if b < 225.0 {
            RouteClass::FromSouth
        } else {
            RouteClass::FromWest
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RouteClass::FromNorth => "from_north",
            RouteClass::FromEast => "from_east",
            RouteClass::FromSouth => "from_south",
            RouteClass::FromWest => "from_west",
            RouteClass::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for RouteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Classifies the direction a trajectory approached `intersection` from.
///
/// A trajectory that never comes within `relevance_radius_m` is irrelevant.
/// Otherwise the bearing from the intersection to the earliest point in the
/// annulus `[r/2, r]` decides the class (first point when none lies there).
pub fn classify_route(
    traj: &Trajectory,
    intersection: GeoPosition,
    relevance_radius_m: f64,
) -> Result<RouteClass, GeoError> {
    let first = traj.points.first().ok_or(GeoError::EmptyTrajectory)?;
    let distances: Vec<f64> = traj
        .points
        .iter()
        .map(|p| haversine_distance(intersection, p.position))
        .collect();
    if !distances.iter().any(|&d| d <= relevance_radius_m) {
        return Ok(RouteClass::Irrelevant);
    }
    let inner = relevance_radius_m / 2.0;
    let approach = traj
        .points
        .iter()
        .zip(&distances)
        .find(|(_, &d)| d >= inner && d <= relevance_radius_m)
        .map(|(p, _)| p)
        .unwrap_or(first);
    Ok(RouteClass::from_bearing(initial_bearing_deg(
        intersection,
        approach.position,
    )))
}
