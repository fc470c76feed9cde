//! Post-hoc analysis: latency decomposition, latency statistics, geofence
//! dimensioning, CAM occurrence matrices and energy accounting.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use chrono::{DateTime, Duration, NaiveDate, Timelike};
use thiserror::Error;

use crate::sim::{first_cpm_latency, EventKind, EventLog, LogError};
use crate::v2x::{decode_cam, CamMessage, StationId};

pub const MINUTES_PER_DAY: usize = 1440;
pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("run is incomplete: {0}")]
    IncompleteRun(String),
    #[error("no samples")]
    EmptyInput,
    #[error("speed must be positive, got {0} km/h")]
    NonPositiveSpeed(f64),
    #[error("energy report needs at least one day")]
    NoDays,
    #[error("energy model: {0}")]
    InvalidModel(String),
}

impl From<LogError> for AnalyticsError {
    fn from(e: LogError) -> Self {
        AnalyticsError::IncompleteRun(e.to_string())
    }
}

/// End-to-end latency split into application-manager processing,
/// deployment, and everything else. The parts sum to the total exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBreakdown {
    pub end_to_end_s: f64,
    pub manager_processing_s: f64,
    pub deployment_s: f64,
    pub other_s: f64,
}

impl LatencyBreakdown {
    pub fn from_components(manager_processing_s: f64, deployment_s: f64, other_s: f64) -> Self {
        LatencyBreakdown {
            end_to_end_s: manager_processing_s + deployment_s + other_s,
            manager_processing_s,
            deployment_s,
            other_s,
        }
    }
}

/// Decomposes the first trigger-to-CPM cycle in `log`.
///
/// End-to-end comes from the vehicle's own clock. Manager processing and
/// deployment are read from the node-local timestamps of `RequestIssued`,
/// `ManagerDone` and `PipelineReady`, so clock offsets between the server
/// and the roadside unit show up in the deployment figure (and are absorbed
/// by "other").
pub fn decompose(log: &EventLog) -> Result<LatencyBreakdown, AnalyticsError> {
    let missing = |what: &str| AnalyticsError::IncompleteRun(format!("no {what} event"));
    let request = log
        .of_kind(EventKind::RequestIssued)
        .next()
        .ok_or_else(|| missing("RequestIssued"))?;
    let station = request
        .payload
        .as_deref()
        .and_then(|b| decode_cam(b).ok())
        .map(|c| c.station_id)
        .ok_or_else(|| AnalyticsError::IncompleteRun("request without triggering CAM".into()))?;
    let manager = log
        .of_kind(EventKind::ManagerDone)
        .find(|e| e.causation_seq == Some(request.seq))
        .ok_or_else(|| missing("ManagerDone"))?;
    let ready = log
        .of_kind(EventKind::PipelineReady)
        .find(|e| e.causation_seq == Some(manager.seq))
        .ok_or_else(|| missing("PipelineReady"))?;
    let end_to_end_s = first_cpm_latency(log, station)?;
    let manager_processing_s = (manager.node_local - request.node_local).as_secs();
    let deployment_s = (ready.node_local - manager.node_local).as_secs();
    Ok(LatencyBreakdown {
        end_to_end_s,
        manager_processing_s,
        deployment_s,
        other_s: end_to_end_s - manager_processing_s - deployment_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single sample.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn latency_stats(samples: &[f64]) -> Result<LatencyStats, AnalyticsError> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let std = if n > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencyStats {
        mean,
        median,
        std,
        min: sorted[0],
        max: sorted[n - 1],
        count: n,
    })
}

/// Distance covered at `speed_kmh` during the end-to-end latency plus a
/// planning horizon: how far out a geofence must trigger.
pub fn geofence_distance(
    speed_kmh: f64,
    e2e_s: f64,
    planning_horizon_s: f64,
) -> Result<f64, AnalyticsError> {
    if !(speed_kmh > 0.0) || !speed_kmh.is_finite() {
        return Err(AnalyticsError::NonPositiveSpeed(speed_kmh));
    }
    Ok(speed_kmh / 3.6 * (e2e_s + planning_horizon_s))
}

/// Minute-resolution CAM presence per local calendar day.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OccurrenceMatrix {
    days: Vec<NaiveDate>,
    cells: Vec<Vec<bool>>,
}

impl OccurrenceMatrix {
    /// All-false matrix covering `n_days` consecutive days from `start`.
    pub fn empty(start: NaiveDate, n_days: usize) -> Self {
        let days: Vec<_> = (0..n_days)
            .map(|i| start + Duration::days(i as i64))
            .collect();
        OccurrenceMatrix {
            cells: vec![vec![false; MINUTES_PER_DAY]; days.len()],
            days,
        }
    }

    pub fn from_rows(start: NaiveDate, rows: Vec<Vec<bool>>) -> Self {
        assert!(rows.iter().all(|r| r.len() == MINUTES_PER_DAY));
        let mut m = Self::empty(start, rows.len());
        m.cells = rows;
        m
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn row(&self, day: usize) -> &[bool] {
        &self.cells[day]
    }

    pub fn is_set(&self, day: usize, minute: usize) -> bool {
        self.cells[day][minute]
    }

    /// Marks a cell, extending the day range as needed so that it stays
    /// contiguous.
    pub fn mark(&mut self, date: NaiveDate, minute: usize) {
        let idx = self.ensure_day(date);
        self.cells[idx][minute] = true;
    }

    /// Pads the matrix so that it covers `start .. start + n_days`.
    pub fn extend_to_span(&mut self, start: NaiveDate, n_days: usize) {
        if n_days == 0 {
            return;
        }
        self.ensure_day(start);
        self.ensure_day(start + Duration::days(n_days as i64 - 1));
    }

    fn ensure_day(&mut self, date: NaiveDate) -> usize {
        match (self.days.first().copied(), self.days.last().copied()) {
            (None, _) | (_, None) => {
                self.days.push(date);
                self.cells.push(vec![false; MINUTES_PER_DAY]);
                0
            }
            (Some(first), Some(last)) => {
                if date < first {
                    let n = (first - date).num_days() as usize;
                    for i in (0..n).rev() {
                        self.days.insert(0, date + Duration::days(i as i64));
                        self.cells.insert(0, vec![false; MINUTES_PER_DAY]);
                    }
                    0
                } else if date > last {
                    let n = (date - last).num_days();
                    for i in 1..=n {
                        self.days.push(last + Duration::days(i));
                        self.cells.push(vec![false; MINUTES_PER_DAY]);
                    }
                    self.days.len() - 1
                } else {
                    (date - first).num_days() as usize
                }
            }
        }
    }

    pub fn occurrence_minutes(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|r| r.iter().filter(|&&c| c).count())
            .collect()
    }

    /// `date,m0000,...,m1439` header then one 0/1 row per day.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date");
        for m in 0..MINUTES_PER_DAY {
            let _ = write!(out, ",{:02}:{:02}", m / 60, m % 60);
        }
        out.push('\n');
        for (d, row) in self.days.iter().zip(&self.cells) {
            let _ = write!(out, "{d}");
            for &c in row {
                out.push_str(if c { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

/// Local calendar date and minute-of-day of an epoch timestamp.
pub fn local_minute(epoch_ms: u64, timezone_offset_min: i32) -> (NaiveDate, usize) {
    let local_ms = epoch_ms as i64 + timezone_offset_min as i64 * 60_000;
    let dt = DateTime::from_timestamp_millis(local_ms)
        .expect("u64 millisecond timestamps fit chrono's range")
        .naive_utc();
    (dt.date(), (dt.hour() * 60 + dt.minute()) as usize)
}

/// Streaming builder behind [`build_occurrence_matrix`].
#[derive(Debug, Clone)]
pub struct OccurrenceBuilder<'a> {
    relevant: &'a BTreeSet<StationId>,
    timezone_offset_min: i32,
    matrix: OccurrenceMatrix,
}

impl<'a> OccurrenceBuilder<'a> {
    pub fn new(relevant: &'a BTreeSet<StationId>, timezone_offset_min: i32) -> Self {
        OccurrenceBuilder {
            relevant,
            timezone_offset_min,
            matrix: OccurrenceMatrix::default(),
        }
    }

    pub fn add(&mut self, cam: &CamMessage) {
        if self.relevant.contains(&cam.station_id) {
            let (date, minute) = local_minute(cam.generation_time_ms, self.timezone_offset_min);
            self.matrix.mark(date, minute);
        }
    }

    pub fn finish(self) -> OccurrenceMatrix {
        self.matrix
    }
}

/// Marks each (local day, minute) in which a relevant station sent a CAM.
/// Days between the first and last marked day are included even if empty.
pub fn build_occurrence_matrix(
    cams: &[CamMessage],
    relevant_stations: &BTreeSet<StationId>,
    timezone_offset_min: i32,
) -> OccurrenceMatrix {
    let mut b = OccurrenceBuilder::new(relevant_stations, timezone_offset_min);
    for cam in cams {
        b.add(cam);
    }
    b.finish()
}

/// Per day, the number of minutes the pipeline would be running when each
/// occurrence minute `m` keeps it active through `m + buffer_min` (clipped at
/// the end of the day).
pub fn active_minutes(matrix: &OccurrenceMatrix, buffer_min: usize) -> Vec<usize> {
    matrix
        .cells
        .iter()
        .map(|row| {
            let mut count = 0;
            // first minute not yet covered by an earlier occurrence's buffer
            let mut covered_until = 0usize;
            for (m, _) in row.iter().enumerate().filter(|(_, &c)| c) {
                let start = m.max(covered_until);
                let end = (m + buffer_min).min(MINUTES_PER_DAY - 1) + 1;
                if end > start {
                    count += end - start;
                    covered_until = end;
                }
            }
            count
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub extra_power_per_unit_w: f64,
    pub n_units: u32,
    pub buffer_min: usize,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            extra_power_per_unit_w: 45.0,
            n_units: 4,
            buffer_min: 1,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.n_units == 0 {
            return Err(AnalyticsError::InvalidModel(
                "n_units must be at least 1".into(),
            ));
        }
        if !(self.extra_power_per_unit_w >= 0.0) || !self.extra_power_per_unit_w.is_finite() {
            return Err(AnalyticsError::InvalidModel(
                "extra power must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Extra energy of all units for one minute of activity, Wh.
    pub fn wh_per_minute(&self) -> f64 {
        self.extra_power_per_unit_w * self.n_units as f64 / 60.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub days: usize,
    pub n_units: u32,
    pub occurrence_min_per_day: f64,
    pub active_min_per_day: f64,
    pub inactive_min_per_day: f64,
    pub wh_per_minute: f64,
    pub avoidable_wh_per_day: f64,
    pub avoidable_kwh_per_year: f64,
}

impl EnergyReport {
    /// Annual avoidable energy for `n` units under the same traffic.
    pub fn extrapolated_kwh_per_year(&self, n: u32) -> f64 {
        self.avoidable_kwh_per_year * n as f64 / self.n_units as f64
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, f64); 9] = [
            ("days", self.days as f64),
            ("n_units", self.n_units as f64),
            ("occurrence_min_per_day", self.occurrence_min_per_day),
            ("active_min_per_day", self.active_min_per_day),
            ("inactive_min_per_day", self.inactive_min_per_day),
            ("wh_per_minute", self.wh_per_minute),
            ("avoidable_wh_per_day", self.avoidable_wh_per_day),
            ("avoidable_kwh_per_year", self.avoidable_kwh_per_year),
            (
                "extrapolated_kwh_per_year_100_units",
                self.extrapolated_kwh_per_year(100),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={}", fmt_num(v));
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

pub fn energy_report(
    matrix: &OccurrenceMatrix,
    model: &EnergyModel,
) -> Result<EnergyReport, AnalyticsError> {
    model.validate()?;
    let days = matrix.days().len();
    if days == 0 {
        return Err(AnalyticsError::NoDays);
    }
    let occ = matrix.occurrence_minutes();
    let active = active_minutes(matrix, model.buffer_min);
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / days as f64;
    let active_min_per_day = mean(&active);
    let inactive_min_per_day = MINUTES_PER_DAY as f64 - active_min_per_day;
    let wh_per_minute = model.wh_per_minute();
    let avoidable_wh_per_day = inactive_min_per_day * wh_per_minute;
    Ok(EnergyReport {
        days,
        n_units: model.n_units,
        occurrence_min_per_day: mean(&occ),
        active_min_per_day,
        inactive_min_per_day,
        wh_per_minute,
        avoidable_wh_per_day,
        avoidable_kwh_per_year: avoidable_wh_per_day * DAYS_PER_YEAR / 1000.0,
    })
}

/// Seconds during which the pipeline was deployed (from the end of manager
/// processing until teardown or `end_s`), summed over all deployments.
pub fn deployed_seconds(log: &EventLog, end_s: f64) -> f64 {
    let mut total = 0.0;
    let mut since: Option<f64> = None;
    for ev in log.events() {
        match ev.kind {
            EventKind::ManagerDone => since = Some(ev.time_true.as_secs()),
            EventKind::Teardown => {
                if let Some(s) = since.take() {
                    total += ev.time_true.as_secs() - s;
                }
            }
            _ => {}
        }
    }
    if let Some(s) = since {
        total += (end_s - s).max(0.0);
    }
    total
}

/// Extra energy (Wh) the deployed pipeline drew during a simulated run.
pub fn simulated_extra_energy_wh(log: &EventLog, end_s: f64, model: &EnergyModel) -> f64 {
    deployed_seconds(log, end_s) / 60.0 * model.wh_per_minute()
}

/// Fixed-width table of per-run breakdowns, one row per run.
pub fn latency_table(rows: &[(String, LatencyBreakdown)]) -> String {
    let mut out = format!(
        "{:<12} {:>22} {:>32} {:>22} {:>10}\n",
        "run", "end_to_end_s", "application_manager_processing_s", "deployment_s", "other_s"
    );
    for (name, b) in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>22.3} {:>32.3} {:>22.3} {:>10.3}",
            name, b.end_to_end_s, b.manager_processing_s, b.deployment_s, b.other_s
        );
    }
    out
}

pub fn latency_csv(rows: &[(String, LatencyBreakdown)]) -> String {
    let mut out = String::from("run,end_to_end_s,manager_processing_s,deployment_s,other_s\n");
    for (name, b) in rows {
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6}",
            b.end_to_end_s, b.manager_processing_s, b.deployment_s, b.other_s
        );
    }
    out
}

pub fn stats_csv(rows: &[(String, LatencyStats)]) -> String {
    let mut out = String::from("transmission,mean_ms,median_ms,std_ms,min_ms,max_ms,count\n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name},{:.3},{:.3},{:.3},{:.3},{:.3},{}",
            s.mean, s.median, s.std, s.min, s.max, s.count
        );
    }
    out
}
