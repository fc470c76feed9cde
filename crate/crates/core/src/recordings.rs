//! CAM recording logs: one JSON object per line, UTF-8, LF, no header.
//!
//! ```text
//! {"received_epoch_ms":1770019200123,"receiver":"srisu4","station_id":1042,"generation_time_ms":1770019200101,"lat_e7":507870000,"lon_e7":60460000,"speed_cms":1389,"heading_ddeg":1800}
//! ```
//!
//! Bad lines are skipped and counted; reading never aborts on content.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::v2x::{CamMessage, GeoPosition, StationId, V2xError};

/// Receptions more than this long before generation are treated as corrupt.
pub const MAX_CLOCK_SKEW_MS: u64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CamRecord {
    pub received_epoch_ms: u64,
    pub receiver_node: String,
    pub cam: CamMessage,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("received {received} ms is more than a day before generation {generated} ms")]
    ImplausibleReception { received: u64, generated: u64 },
    #[error(transparent)]
    Field(#[from] V2xError),
}

impl CamRecord {
    pub fn new(
        received_epoch_ms: u64,
        receiver_node: impl Into<String>,
        cam: CamMessage,
    ) -> Result<Self, RecordError> {
        let rec = CamRecord {
            received_epoch_ms,
            receiver_node: receiver_node.into(),
            cam,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        self.cam.validate()?;
        let generated = self.cam.generation_time_ms;
        if self.received_epoch_ms < generated.saturating_sub(MAX_CLOCK_SKEW_MS) {
            return Err(RecordError::ImplausibleReception {
                received: self.received_epoch_ms,
                generated,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line<'a> {
    received_epoch_ms: u64,
    receiver: std::borrow::Cow<'a, str>,
    station_id: u32,
    generation_time_ms: u64,
    lat_e7: i32,
    lon_e7: i32,
    speed_cms: u16,
    heading_ddeg: u16,
}

fn parse_line(text: &str) -> Result<CamRecord, String> {
    let line: Line = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let station = StationId::new(line.station_id).map_err(|e| e.to_string())?;
    let position = GeoPosition::from_e7(line.lat_e7, line.lon_e7).map_err(|e| e.to_string())?;
    let cam = CamMessage::new(
        station,
        line.generation_time_ms,
        position,
        line.speed_cms,
        line.heading_ddeg,
    )
    .map_err(|e| e.to_string())?;
    CamRecord::new(line.received_epoch_ms, line.receiver.into_owned(), cam)
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseSummary {
    pub ok_count: u64,
    pub rejected_count: u64,
    /// 1-based line number of the first rejected line.
    pub first_error_line: Option<u64>,
}

/// Streaming reader over a CAM log. Holds one line in memory at a time.
/// Blank lines are ignored; an I/O error ends the stream and is available
/// from [`CamLogReader::io_error`].
pub struct CamLogReader<R> {
    input: R,
    buf: String,
    line_no: u64,
    summary: ParseSummary,
    first_error: Option<String>,
    io_error: Option<io::Error>,
}

impl<R: BufRead> CamLogReader<R> {
    pub fn summary(&self) -> ParseSummary {
        self.summary
    }

    /// Message of the first rejected line.
    pub fn first_error(&self) -> Option<&str> {
        self.first_error.as_deref()
    }

    pub fn io_error(&self) -> Option<&io::Error> {
        self.io_error.as_ref()
    }

    pub fn take_io_error(&mut self) -> Option<io::Error> {
        self.io_error.take()
    }
}

impl<R: BufRead> Iterator for CamLogReader<R> {
    type Item = CamRecord;

    fn next(&mut self) -> Option<CamRecord> {
        if self.io_error.is_some() {
            return None;
        }
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                    // non-UTF-8 line: the bytes were consumed, count and move on
                    self.line_no += 1;
                    self.reject(e.to_string());
                    continue;
                }
                Err(e) => {
                    self.io_error = Some(e);
                    return None;
                }
            }
            self.line_no += 1;
            let text = self.buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            match parse_line(text) {
                Ok(rec) => {
                    self.summary.ok_count += 1;
                    return Some(rec);
                }
                Err(msg) => self.reject(msg),
            }
        }
    }
}

impl<R> CamLogReader<R> {
    fn reject(&mut self, message: String) {
        self.summary.rejected_count += 1;
        if self.summary.first_error_line.is_none() {
            self.summary.first_error_line = Some(self.line_no);
            self.first_error = Some(message);
        }
    }
}

pub fn read_cam_log<R: BufRead>(source: R) -> CamLogReader<R> {
    CamLogReader {
        input: source,
        buf: String::new(),
        line_no: 0,
        summary: ParseSummary::default(),
        first_error: None,
        io_error: None,
    }
}

pub fn format_cam_record(rec: &CamRecord) -> String {
    let line = Line {
        received_epoch_ms: rec.received_epoch_ms,
        receiver: rec.receiver_node.as_str().into(),
        station_id: rec.cam.station_id.get(),
        generation_time_ms: rec.cam.generation_time_ms,
        lat_e7: rec.cam.position.latitude_e7(),
        lon_e7: rec.cam.position.longitude_e7(),
        speed_cms: rec.cam.speed_cms,
        heading_ddeg: rec.cam.heading_ddeg,
    };
    serde_json::to_string(&line).expect("plain fields serialize")
}

/// Writes records in input order; returns the row count.
pub fn write_cam_log<'a, I, W>(records: I, mut sink: W) -> io::Result<u64>
where
    I: IntoIterator<Item = &'a CamRecord>,
    W: Write,
{
    let mut n = 0;
    for rec in records {
        sink.write_all(format_cam_record(rec).as_bytes())?;
        sink.write_all(b"\n")?;
        n += 1;
    }
    sink.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(station: u32, t: u64) -> CamRecord {
        let cam = CamMessage::new(
            StationId::new(station).unwrap(),
            t,
            GeoPosition::from_e7(507_870_000, 60_460_000).unwrap(),
            1389,
            1800,
        )
        .unwrap();
        CamRecord::new(t + 22, "srisu4", cam).unwrap()
    }

    #[test]
    fn empty_stream() {
        let mut r = read_cam_log(&b""[..]);
        assert!(r.next().is_none());
        assert_eq!(r.summary(), ParseSummary::default());
        let mut out = Vec::new();
        assert_eq!(write_cam_log(&[], &mut out).unwrap(), 0);
        assert!(out.is_empty());
    }

    #[test]
    fn bad_line_is_isolated() {
        let good = [sample(1, 1_000), sample(2, 2_000)];
        let mut text = String::new();
        text.push_str(&format_cam_record(&good[0]));
        text.push('\n');
        text.push_str(
            &format_cam_record(&good[1]).replace("\"lat_e7\":507870000", "\"lat_e7\":\"x\""),
        );
        text.push('\n');
        text.push_str(&format_cam_record(&good[1]));
        text.push('\n');
        let mut r = read_cam_log(text.as_bytes());
        let got: Vec<_> = r.by_ref().collect();
        assert_eq!(got, good);
        assert_eq!(
            r.summary(),
            ParseSummary {
                ok_count: 2,
                rejected_count: 1,
                first_error_line: Some(2),
            }
        );
        assert!(r.first_error().unwrap().contains("invalid type"));
    }

    #[test]
    fn field_validation_rejects() {
        let base = format_cam_record(&sample(5, 1_000_000_000));
        let cases = [
            base.replace("\"lat_e7\":507870000", "\"lat_e7\":950000000"),
            base.replace("\"station_id\":5", "\"station_id\":0"),
            base.replace("\"heading_ddeg\":1800", "\"heading_ddeg\":3600"),
            base.replace(
                "\"received_epoch_ms\":1000000022",
                "\"received_epoch_ms\":1",
            ),
            base.replace("}", ",\"extra\":1}"),
            "not json".to_string(),
        ];
        for c in cases {
            let mut r = read_cam_log(c.as_bytes());
            assert_eq!(r.next(), None, "{c}");
            assert_eq!(r.summary().rejected_count, 1);
        }
        let mut r = read_cam_log(&b"\xff\xfe\n"[..]);
        assert!(r.next().is_none());
        assert_eq!(r.summary().rejected_count, 1);
        assert!(r.io_error().is_none());
    }

    #[test]
    fn order_is_preserved() {
        let recs: Vec<_> = (1..=5)
            .rev()
            .map(|s| sample(s, 10_000 - s as u64))
            .collect();
        let mut out = Vec::new();
        write_cam_log(&recs, &mut out).unwrap();
        let back: Vec<_> = read_cam_log(out.as_slice()).collect();
        assert_eq!(back, recs);
    }

    fn arb_record() -> impl Strategy<Value = CamRecord> {
        (
            1u32..=u32::MAX,
            0u64..4_000_000_000_000,
            -900_000_000i32..=900_000_000,
            -1_800_000_000i32..=1_800_000_000,
            0u16..=16382,
            0u16..=3599,
            0u64..200_000_000,
            "[a-z0-9-]{1,12}",
        )
            .prop_map(|(s, t, lat, lon, v, h, delay, rx)| {
                let cam = CamMessage::new(
                    StationId::new(s).unwrap(),
                    t,
                    GeoPosition::from_e7(lat, lon).unwrap(),
                    v,
                    h,
                )
                .unwrap();
                let received = (t + delay).saturating_sub(MAX_CLOCK_SKEW_MS);
                CamRecord::new(received, rx, cam).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn roundtrip(recs in proptest::collection::vec(arb_record(), 10_000)) {
            let mut out = Vec::new();
            prop_assert_eq!(write_cam_log(&recs, &mut out).unwrap(), 10_000);
            let mut r = read_cam_log(out.as_slice());
            let back: Vec<_> = r.by_ref().collect();
            prop_assert_eq!(r.summary().rejected_count, 0);
            prop_assert_eq!(back, recs);
        }
    }
}
