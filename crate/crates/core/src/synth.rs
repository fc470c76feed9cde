//! Seeded synthetic CAM recordings with controlled aggregate statistics:
//! exact row and station counts, and per-day occurrence minutes grouped into
//! isolated blocks.

use std::collections::BTreeSet;

use chrono::{NaiveDate, NaiveTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geo::destination;
use crate::recordings::CamRecord;
use crate::v2x::{CamMessage, GeoPosition, StationId};

/// Relevant passes stay this far inside the relevance radius.
const PASS_HALF_LENGTH_M: f64 = 280.0;
/// Seconds of margin at each end of a block so CAMs never spill into a
/// neighbouring minute.
const BLOCK_LEAD_S: u64 = 2;
const BLOCK_TAIL_S: u64 = 3;
const RECEIVERS: [&str; 4] = ["srisu1", "srisu2", "srisu3", "srisu4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayProfile {
    pub occurrence_minutes: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// First local calendar day.
    pub start_date: NaiveDate,
    pub timezone_offset_min: i32,
    pub days: Vec<DayProfile>,
    pub total_rows: usize,
    pub total_stations: usize,
    pub intersection: GeoPosition,
    /// Local hours (start, end) during which relevant traffic appears.
    pub active_hours: (u32, u32),
}

impl Default for SynthConfig {
    /// A week matching the reference recording: 69610 CAMs from 714
    /// stations, 18 occurrence minutes per day on average in 15 blocks.
    fn default() -> Self {
        let occ = [16, 20, 18, 17, 19, 18, 18];
        let blocks = [14, 16, 15, 15, 15, 14, 16];
        SynthConfig {
            seed: 7,
            start_date: NaiveDate::from_ymd_opt(2026, 2, 2).expect("valid date"),
            timezone_offset_min: 60,
            days: occ
                .iter()
                .zip(blocks)
                .map(|(&o, b)| DayProfile {
                    occurrence_minutes: o,
                    blocks: b,
                })
                .collect(),
            total_rows: 69_610,
            total_stations: 714,
            intersection: GeoPosition::from_e7(507_870_000, 60_460_000).expect("valid position"),
            active_hours: (6, 23),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("day {day}: {message}")]
    InvalidDay { day: usize, message: String },
    #[error("{0}")]
    Budget(String),
}

/// Ground truth of a generated recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<CamRecord>,
    pub relevant_stations: BTreeSet<StationId>,
    /// Per day, the local minutes-of-day containing a relevant CAM.
    pub occurrence: Vec<BTreeSet<usize>>,
}

fn pos_on(center: GeoPosition, bearing: f64, dist: f64) -> GeoPosition {
    destination(center, bearing, dist).expect("short offsets stay on the globe")
}

pub fn generate_recording(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h0, h1) = cfg.active_hours;
    if h0 >= h1 || h1 > 24 {
        return Err(SynthError::Budget(format!("bad active hours {h0}..{h1}")));
    }
    let window = ((h1 - h0) * 60) as usize;

    // block lengths per day, then placement in equal slots across the window
    let mut passes: Vec<(u64, usize)> = Vec::new(); // (local start epoch ms, minutes)
    let mut occurrence = Vec::new();
    for (day, p) in cfg.days.iter().enumerate() {
        let bad = |message: &str| SynthError::InvalidDay {
            day,
            message: message.to_string(),
        };
        if p.blocks > p.occurrence_minutes || (p.blocks == 0 && p.occurrence_minutes > 0) {
            return Err(bad("need 1 <= blocks <= occurrence minutes"));
        }
        let mut lengths = vec![1usize; p.blocks];
        for _ in 0..p.occurrence_minutes - p.blocks {
            let i = rng.random_range(0..p.blocks);
            lengths[i] += 1;
        }
        let mut minutes = BTreeSet::new();
        if let Some(slot) = window.checked_div(p.blocks) {
            let longest = *lengths.iter().max().expect("non-empty");
            // block plus buffer plus a gap must fit in each slot
            if longest + 3 > slot {
                return Err(bad("blocks do not fit in the active window"));
            }
            let date = cfg.start_date + chrono::Duration::days(day as i64);
            let midnight_local = date.and_time(NaiveTime::MIN).and_utc().timestamp_millis()
                - cfg.timezone_offset_min as i64 * 60_000;
            for (b, &len) in lengths.iter().enumerate() {
                let offset = rng.random_range(0..=slot - len - 3);
                let start_min = h0 as usize * 60 + b * slot + offset;
                minutes.extend(start_min..start_min + len);
                passes.push(((midnight_local + start_min as i64 * 60_000) as u64, len));
            }
        }
        occurrence.push(minutes);
    }

    let relevant_rows: usize = passes
        .iter()
        .map(|&(_, len)| (len as u64 * 60 - BLOCK_LEAD_S - BLOCK_TAIL_S) as usize + 1)
        .sum();
    if passes.len() > cfg.total_stations {
        return Err(SynthError::Budget("more blocks than stations".into()));
    }
    let n_irrelevant = cfg.total_stations - passes.len();
    let remaining_rows = cfg
        .total_rows
        .checked_sub(relevant_rows)
        .ok_or_else(|| SynthError::Budget("relevant traffic exceeds total rows".into()))?;
    if (n_irrelevant == 0) != (remaining_rows == 0) || remaining_rows < n_irrelevant {
        return Err(SynthError::Budget(
            "rows and stations cannot be split consistently".into(),
        ));
    }

    let mut ids = BTreeSet::new();
    while ids.len() < cfg.total_stations {
        ids.insert(rng.random_range(1..=u32::MAX));
    }
    let mut ids: Vec<u32> = ids.into_iter().collect();
    ids.shuffle(&mut rng);
    let station = |v: u32| StationId::new(v).expect("drawn from 1..");

    let mut records = Vec::with_capacity(cfg.total_rows);
    let mut relevant_stations = BTreeSet::new();
    let push = |records: &mut Vec<CamRecord>, rng: &mut ChaCha8Rng, cam: CamMessage| {
        let received = cam.generation_time_ms + rng.random_range(1..30);
        let rx = RECEIVERS[rng.random_range(0..RECEIVERS.len())];
        records.push(CamRecord::new(received, rx, cam).expect("received after generation"));
    };

    // relevant passes: straight through the intersection, entering near a
    // cardinal direction
    for (&(start_ms, len), &id) in passes.iter().zip(&ids) {
        let sid = station(id);
        relevant_stations.insert(sid);
        let from =
            [0.0, 90.0, 180.0, 270.0][rng.random_range(0..4)] + rng.random_range(-25.0..25.0);
        let secs = len as u64 * 60 - BLOCK_LEAD_S - BLOCK_TAIL_S;
        let speed = 2.0 * PASS_HALF_LENGTH_M / secs as f64;
        let heading = (from + 180.0f64).rem_euclid(360.0);
        for k in 0..=secs {
            let along = -PASS_HALF_LENGTH_M + speed * k as f64;
            let pos = if along < 0.0 {
                pos_on(cfg.intersection, from, -along)
            } else {
                pos_on(cfg.intersection, heading, along)
            };
            let cam = CamMessage::new(
                sid,
                start_ms + (BLOCK_LEAD_S + k) * 1000,
                pos,
                (speed * 100.0).round() as u16,
                ((heading * 10.0).round() as u16) % 3600,
            )
            .expect("values in range");
            push(&mut records, &mut rng, cam);
        }
    }

    // irrelevant traffic: 2.5 to 3.5 km out, slow enough to stay 1..5 km away
    let mut lengths: Vec<usize> = (0..n_irrelevant)
        .map(|_| rng.random_range(60..145))
        .collect();
    let mut diff = remaining_rows as i64 - lengths.iter().sum::<usize>() as i64;
    let mut i = 0;
    while diff != 0 {
        let l = &mut lengths[i % n_irrelevant];
        if diff > 0 && *l < 145 {
            *l += 1;
            diff -= 1;
        } else if diff < 0 && *l > 1 {
            *l -= 1;
            diff += 1;
        } else if lengths
            .iter()
            .all(|&l| if diff > 0 { l >= 145 } else { l <= 1 })
        {
            // outside the comfortable range; let trajectories grow
            lengths[i % n_irrelevant] += 1;
            diff -= 1;
        }
        i += 1;
    }
    let span_ms = cfg.days.len().max(1) as u64 * 86_400_000;
    let first_midnight = cfg
        .start_date
        .and_time(NaiveTime::MIN)
        .and_utc()
        .timestamp_millis()
        - cfg.timezone_offset_min as i64 * 60_000;
    for (&id, &n) in ids[passes.len()..].iter().zip(&lengths) {
        let sid = station(id);
        let start = first_midnight as u64 + rng.random_range(0..span_ms - n as u64 * 1000);
        let origin = pos_on(
            cfg.intersection,
            rng.random_range(0.0..360.0),
            rng.random_range(2_500.0..3_500.0),
        );
        let heading: f64 = rng.random_range(0.0..360.0);
        // at most 1.4 km of travel
        let speed: f64 = rng.random_range(0.0..(1_400.0 / n as f64).min(8.0));
        for k in 0..n {
            let pos = pos_on(origin, heading, speed * k as f64);
            let cam = CamMessage::new(
                sid,
                start + k as u64 * 1000,
                pos,
                (speed * 100.0).round() as u16,
                ((heading * 10.0).round() as u16) % 3600,
            )
            .expect("values in range");
            push(&mut records, &mut rng, cam);
        }
    }

    records.sort_by_key(|r| {
        (
            r.received_epoch_ms,
            r.cam.station_id,
            r.cam.generation_time_ms,
        )
    });
    Ok(SynthOutput {
        records,
        relevant_stations,
        occurrence,
    })
}
