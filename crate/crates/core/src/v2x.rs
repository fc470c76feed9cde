//! CAM and CPM message models with a fixed-layout binary wire codec.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! CAM, 27 bytes:
//!   0..2   magic "CA" (0x43 0x41)
//!   2      version 0x01
//!   3..7   station_id        u32
//!   7..15  generation_time_ms u64
//!   15..19 latitude_e7       i32
//!   19..23 longitude_e7      i32
//!   23..25 speed_cms         u16
//!   25..27 heading_ddeg      u16
//!
//! CPM, 16 + 21 * n bytes:
//!   0..2   magic "CP" (0x43 0x50)
//!   2      version 0x01
//!   3..7   station_id        u32
//!   7..15  reference_time_ms u64
//!   15     object_count      u8
//!   then per object (21 bytes):
//!   +0  object_id u16, +2 latitude_e7 i32, +6 longitude_e7 i32,
//!   +10 speed_cms u16, +12 heading_ddeg u16, +14 object_class u8,
//!   +15 six reserved zero bytes
//! ```

use std::fmt;

use thiserror::Error;

pub const CAM_MAGIC: [u8; 2] = *b"CA";
pub const CPM_MAGIC: [u8; 2] = *b"CP";
pub const WIRE_VERSION: u8 = 0x01;

pub const CAM_LEN: usize = 27;
pub const CPM_HEADER_LEN: usize = 16;
pub const CPM_OBJECT_LEN: usize = 21;

pub const MAX_HEADING_DDEG: u16 = 3599;
pub const MAX_SPEED_CMS: u16 = 16382;
pub const MAX_CPM_OBJECTS: usize = 255;

const LAT_E7_LIMIT: i32 = 900_000_000;
const LON_E7_LIMIT: i32 = 1_800_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum V2xError {
    #[error("station id 0 is reserved")]
    ReservedStationId,
    #[error("latitude_e7 {0} out of range")]
    LatitudeOutOfRange(i64),
    #[error("longitude_e7 {0} out of range")]
    LongitudeOutOfRange(i64),
    #[error("heading {0} exceeds {MAX_HEADING_DDEG}")]
    HeadingOutOfRange(u16),
    #[error("speed {0} exceeds {MAX_SPEED_CMS}")]
    SpeedOutOfRange(u16),
    #[error("{0} objects exceed the CPM limit of {MAX_CPM_OBJECTS}")]
    TooManyObjects(usize),
    #[error("malformed message: {0}")]
    MalformedMessage(String),
}

fn malformed(msg: impl Into<String>) -> V2xError {
    V2xError::MalformedMessage(msg.into())
}

/// Pseudonymous sender identifier. Zero means "unassigned" and is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StationId(u32);

impl StationId {
    pub fn new(value: u32) -> Result<Self, V2xError> {
        if value == 0 {
            Err(V2xError::ReservedStationId)
        } else {
            Ok(StationId(value))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// WGS84 position at 1e-7 degree resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GeoPosition {
    latitude_e7: i32,
    longitude_e7: i32,
}

impl GeoPosition {
    pub fn from_e7(latitude_e7: i32, longitude_e7: i32) -> Result<Self, V2xError> {
        if !(-LAT_E7_LIMIT..=LAT_E7_LIMIT).contains(&latitude_e7) {
            return Err(V2xError::LatitudeOutOfRange(latitude_e7.into()));
        }
        if !(-LON_E7_LIMIT..=LON_E7_LIMIT).contains(&longitude_e7) {
            return Err(V2xError::LongitudeOutOfRange(longitude_e7.into()));
        }
        Ok(GeoPosition {
            latitude_e7,
            longitude_e7,
        })
    }

    /// Rounds degrees to the nearest 1e-7.
    pub fn from_degrees(lat_deg: f64, lon_deg: f64) -> Result<Self, V2xError> {
        let lat = (lat_deg * 1e7).round();
        let lon = (lon_deg * 1e7).round();
        if !lat.is_finite() || lat.abs() > LAT_E7_LIMIT as f64 {
            return Err(V2xError::LatitudeOutOfRange(lat as i64));
        }
        if !lon.is_finite() || lon.abs() > LON_E7_LIMIT as f64 {
            return Err(V2xError::LongitudeOutOfRange(lon as i64));
        }
        Self::from_e7(lat as i32, lon as i32)
    }

    pub fn latitude_e7(self) -> i32 {
        self.latitude_e7
    }

    pub fn longitude_e7(self) -> i32 {
        self.longitude_e7
    }

    pub fn lat_deg(self) -> f64 {
        self.latitude_e7 as f64 / 1e7
    }

    pub fn lon_deg(self) -> f64 {
        self.longitude_e7 as f64 / 1e7
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamMessage {
    pub station_id: StationId,
    /// Sender clock, milliseconds since the Unix epoch.
    pub generation_time_ms: u64,
    pub position: GeoPosition,
    pub speed_cms: u16,
    pub heading_ddeg: u16,
}

impl CamMessage {
    pub fn new(
        station_id: StationId,
        generation_time_ms: u64,
        position: GeoPosition,
        speed_cms: u16,
        heading_ddeg: u16,
    ) -> Result<Self, V2xError> {
        let msg = CamMessage {
            station_id,
            generation_time_ms,
            position,
            speed_cms,
            heading_ddeg,
        };
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<(), V2xError> {
        check_motion(self.speed_cms, self.heading_ddeg)
    }
}

fn check_motion(speed_cms: u16, heading_ddeg: u16) -> Result<(), V2xError> {
    if heading_ddeg > MAX_HEADING_DDEG {
        return Err(V2xError::HeadingOutOfRange(heading_ddeg));
    }
    if speed_cms > MAX_SPEED_CMS {
        return Err(V2xError::SpeedOutOfRange(speed_cms));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ObjectClass {
    Unknown = 0,
    Pedestrian = 1,
    Cyclist = 2,
    PassengerCar = 3,
    Truck = 4,
}

impl ObjectClass {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Self::Unknown),
            1 => Some(Self::Pedestrian),
            2 => Some(Self::Cyclist),
            3 => Some(Self::PassengerCar),
            4 => Some(Self::Truck),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerceivedObject {
    pub object_id: u16,
    pub position: GeoPosition,
    pub speed_cms: u16,
    pub heading_ddeg: u16,
    pub object_class: ObjectClass,
}

impl PerceivedObject {
    pub fn validate(&self) -> Result<(), V2xError> {
        if self.heading_ddeg > MAX_HEADING_DDEG {
            return Err(V2xError::HeadingOutOfRange(self.heading_ddeg));
        }
        Ok(())
    }
}

/// Collective perception message sent by a roadside unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpmMessage {
    station_id: StationId,
    reference_time_ms: u64,
    objects: Vec<PerceivedObject>,
}

impl CpmMessage {
    pub fn new(
        station_id: StationId,
        reference_time_ms: u64,
        objects: Vec<PerceivedObject>,
    ) -> Result<Self, V2xError> {
        if objects.len() > MAX_CPM_OBJECTS {
            return Err(V2xError::TooManyObjects(objects.len()));
        }
        for obj in &objects {
            obj.validate()?;
        }
        Ok(CpmMessage {
            station_id,
            reference_time_ms,
            objects,
        })
    }

    pub fn station_id(&self) -> StationId {
        self.station_id
    }

    pub fn reference_time_ms(&self) -> u64 {
        self.reference_time_ms
    }

    pub fn objects(&self) -> &[PerceivedObject] {
        &self.objects
    }
}

/// Wraps a fused object list into a CPM stamped at `now_ms`.
pub fn build_cpm(
    objects: Vec<PerceivedObject>,
    rsu: StationId,
    now_ms: u64,
) -> Result<CpmMessage, V2xError> {
    CpmMessage::new(rsu, now_ms, objects)
}

pub fn encode_cam(msg: &CamMessage) -> Vec<u8> {
    debug_assert!(msg.validate().is_ok(), "encoding an invalid CAM");
    let mut out = Vec::with_capacity(CAM_LEN);
    out.extend_from_slice(&CAM_MAGIC);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&msg.station_id.get().to_le_bytes());
    out.extend_from_slice(&msg.generation_time_ms.to_le_bytes());
    out.extend_from_slice(&msg.position.latitude_e7.to_le_bytes());
    out.extend_from_slice(&msg.position.longitude_e7.to_le_bytes());
    out.extend_from_slice(&msg.speed_cms.to_le_bytes());
    out.extend_from_slice(&msg.heading_ddeg.to_le_bytes());
    out
}

pub fn decode_cam(bytes: &[u8]) -> Result<CamMessage, V2xError> {
    if bytes.len() != CAM_LEN {
        return Err(malformed(format!(
            "CAM must be {CAM_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let mut r = Reader::new(bytes);
    r.expect_header(CAM_MAGIC)?;
    let station_id = StationId::new(r.u32()).map_err(|e| malformed(e.to_string()))?;
    let generation_time_ms = r.u64();
    let position = r.position()?;
    let speed_cms = r.u16();
    let heading_ddeg = r.u16();
    CamMessage::new(
        station_id,
        generation_time_ms,
        position,
        speed_cms,
        heading_ddeg,
    )
    .map_err(|e| malformed(e.to_string()))
}

pub fn encode_cpm(msg: &CpmMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(CPM_HEADER_LEN + CPM_OBJECT_LEN * msg.objects.len());
    out.extend_from_slice(&CPM_MAGIC);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&msg.station_id.get().to_le_bytes());
    out.extend_from_slice(&msg.reference_time_ms.to_le_bytes());
    // count fits: CpmMessage::new caps objects at 255
    out.push(msg.objects.len() as u8);
    for obj in &msg.objects {
        out.extend_from_slice(&obj.object_id.to_le_bytes());
        out.extend_from_slice(&obj.position.latitude_e7.to_le_bytes());
        out.extend_from_slice(&obj.position.longitude_e7.to_le_bytes());
        out.extend_from_slice(&obj.speed_cms.to_le_bytes());
        out.extend_from_slice(&obj.heading_ddeg.to_le_bytes());
        out.push(obj.object_class as u8);
        out.extend_from_slice(&[0u8; 6]);
    }
    out
}

pub fn decode_cpm(bytes: &[u8]) -> Result<CpmMessage, V2xError> {
    if bytes.len() < CPM_HEADER_LEN {
        return Err(malformed(format!(
            "CPM header needs {CPM_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let mut r = Reader::new(bytes);
    r.expect_header(CPM_MAGIC)?;
    let station_id = StationId::new(r.u32()).map_err(|e| malformed(e.to_string()))?;
    let reference_time_ms = r.u64();
    let count = r.u8() as usize;
    let expected = CPM_HEADER_LEN + CPM_OBJECT_LEN * count;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "CPM with {count} objects must be {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let object_id = r.u16();
        let position = r.position()?;
        let speed_cms = r.u16();
        let heading_ddeg = r.u16();
        let class_byte = r.u8();
        let object_class = ObjectClass::from_u8(class_byte)
            .ok_or_else(|| malformed(format!("unknown object class {class_byte}")))?;
        if r.take(6).iter().any(|&b| b != 0) {
            return Err(malformed("reserved object bytes must be zero"));
        }
        objects.push(PerceivedObject {
            object_id,
            position,
            speed_cms,
            heading_ddeg,
            object_class,
        });
    }
    CpmMessage::new(station_id, reference_time_ms, objects).map_err(|e| malformed(e.to_string()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    // Callers check the total length up front.
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn expect_header(&mut self, magic: [u8; 2]) -> Result<(), V2xError> {
        let got = self.take(2);
        if got != magic {
            return Err(malformed(format!("bad magic {:02x}{:02x}", got[0], got[1])));
        }
        let version = self.u8();
        if version != WIRE_VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn position(&mut self) -> Result<GeoPosition, V2xError> {
        let lat = self.i32();
        let lon = self.i32();
        GeoPosition::from_e7(lat, lon).map_err(|e| malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(v: u32) -> StationId {
        StationId::new(v).unwrap()
    }

    fn origin() -> GeoPosition {
        GeoPosition::from_e7(0, 0).unwrap()
    }

    fn sample_cam() -> CamMessage {
        CamMessage::new(
            sid(0x0102_0304),
            1_767_225_600_123,
            GeoPosition::from_e7(507_870_000, 60_460_000).unwrap(),
            1389,
            1800,
        )
        .unwrap()
    }

    #[test]
    fn zero_cam_has_fixed_header_and_zero_fields() {
        let cam = CamMessage::new(sid(1), 0, origin(), 0, 0).unwrap();
        let bytes = encode_cam(&cam);
        assert_eq!(bytes.len(), CAM_LEN);
        assert_eq!(&bytes[..3], &[0x43, 0x41, 0x01]);
        assert_eq!(&bytes[3..7], &[1, 0, 0, 0]);
        assert!(bytes[7..].iter().all(|&b| b == 0));
    }

    #[test]
    fn cam_layout_matches_hand_written_bytes() {
        let cam = sample_cam();
        let mut expected = vec![0x43, 0x41, 0x01, 0x04, 0x03, 0x02, 0x01];
        expected.extend_from_slice(&1_767_225_600_123u64.to_le_bytes());
        expected.extend_from_slice(&507_870_000i32.to_le_bytes());
        expected.extend_from_slice(&60_460_000i32.to_le_bytes());
        expected.extend_from_slice(&[0x6d, 0x05]); // 1389
        expected.extend_from_slice(&[0x08, 0x07]); // 1800
        assert_eq!(encode_cam(&cam), expected);
        assert_eq!(decode_cam(&expected).unwrap(), cam);
    }

    #[test]
    fn decode_rejects_degenerate_and_mutated_cams() {
        assert!(matches!(
            decode_cam(&[]),
            Err(V2xError::MalformedMessage(_))
        ));

        let good = encode_cam(&sample_cam());
        let mut heading = good.clone();
        heading[25..27].copy_from_slice(&3600u16.to_le_bytes());
        assert!(matches!(
            decode_cam(&heading),
            Err(V2xError::MalformedMessage(_))
        ));

        let mut speed = good.clone();
        speed[23..25].copy_from_slice(&16383u16.to_le_bytes());
        assert!(decode_cam(&speed).is_err());

        let mut station = good.clone();
        station[3..7].copy_from_slice(&[0, 0, 0, 0]);
        assert!(decode_cam(&station).is_err());

        let mut lat = good.clone();
        lat[15..19].copy_from_slice(&900_000_001i32.to_le_bytes());
        assert!(decode_cam(&lat).is_err());

        for i in 0..3 {
            let mut b = good.clone();
            b[i] ^= 0xff;
            assert!(decode_cam(&b).is_err(), "header byte {i}");
        }
        assert!(decode_cam(&good[..26]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_cam(&long).is_err());
    }

    #[test]
    fn empty_cpm_is_header_only() {
        let cpm = build_cpm(vec![], sid(9), 5).unwrap();
        assert_eq!(cpm.station_id(), sid(9));
        assert_eq!(cpm.reference_time_ms(), 5);
        let bytes = encode_cpm(&cpm);
        assert_eq!(bytes.len(), CPM_HEADER_LEN);
        assert_eq!(&bytes[..3], &[0x43, 0x50, 0x01]);
        assert_eq!(bytes[15], 0);
        assert_eq!(decode_cpm(&bytes).unwrap(), cpm);
    }

    fn object(id: u16) -> PerceivedObject {
        PerceivedObject {
            object_id: id,
            position: GeoPosition::from_e7(507_870_000 + id as i32, 60_460_000).unwrap(),
            speed_cms: 500,
            heading_ddeg: 900,
            object_class: ObjectClass::PassengerCar,
        }
    }

    #[test]
    fn build_cpm_preserves_objects_and_enforces_limit() {
        let cpm = build_cpm(vec![object(7)], sid(9), 5).unwrap();
        assert_eq!(cpm.objects(), &[object(7)]);

        let at_limit: Vec<_> = (0..255).map(object).collect();
        let cpm = build_cpm(at_limit, sid(1), 0).unwrap();
        assert_eq!(
            encode_cpm(&cpm).len(),
            CPM_HEADER_LEN + 255 * CPM_OBJECT_LEN
        );

        let over: Vec<_> = (0..256).map(object).collect();
        assert_eq!(
            build_cpm(over, sid(1), 0).unwrap_err(),
            V2xError::TooManyObjects(256)
        );
    }

    #[test]
    fn cpm_object_record_layout() {
        let cpm = build_cpm(vec![object(0x0a0b)], sid(2), 7).unwrap();
        let bytes = encode_cpm(&cpm);
        let rec = &bytes[CPM_HEADER_LEN..];
        assert_eq!(rec.len(), CPM_OBJECT_LEN);
        assert_eq!(&rec[0..2], &[0x0b, 0x0a]);
        assert_eq!(&rec[2..6], &(507_870_000i32 + 0x0a0b).to_le_bytes());
        assert_eq!(rec[14], ObjectClass::PassengerCar as u8);
        assert_eq!(&rec[15..], &[0; 6]);
    }

    #[test]
    fn decode_cpm_rejects_corruption() {
        let bytes = encode_cpm(&build_cpm(vec![object(1), object(2)], sid(3), 11).unwrap());
        assert!(decode_cpm(&bytes[..bytes.len() - 1]).is_err());
        let mut count = bytes.clone();
        count[15] = 3;
        assert!(decode_cpm(&count).is_err());
        let mut class = bytes.clone();
        class[CPM_HEADER_LEN + 14] = 9;
        assert!(decode_cpm(&class).is_err());
        let mut reserved = bytes.clone();
        reserved[CPM_HEADER_LEN + 20] = 1;
        assert!(decode_cpm(&reserved).is_err());
        let mut heading = bytes.clone();
        heading[CPM_HEADER_LEN + 12..CPM_HEADER_LEN + 14].copy_from_slice(&3600u16.to_le_bytes());
        assert!(decode_cpm(&heading).is_err());
        assert!(decode_cpm(&encode_cam(&sample_cam())).is_err());
    }

    #[test]
    fn degree_conversion_rounds_and_bounds() {
        let p = GeoPosition::from_degrees(50.787, 6.046).unwrap();
        assert_eq!(p.latitude_e7(), 507_870_000);
        assert_eq!(p.longitude_e7(), 60_460_000);
        assert!(GeoPosition::from_degrees(90.1, 0.0).is_err());
        assert!(GeoPosition::from_degrees(0.0, -180.5).is_err());
        assert!(GeoPosition::from_degrees(f64::NAN, 0.0).is_err());
    }
}
