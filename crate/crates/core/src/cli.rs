//! Command-line workflows. Every command writes plain files into an output
//! directory and returns a stable exit code: 0 success, 2 bad input,
//! 3 internal failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::analytics::{
    active_minutes, decompose, deployed_seconds, energy_report, geofence_distance, latency_csv,
    latency_table, local_minute, simulated_extra_energy_wh, EnergyModel, EnergyReport,
    LatencyBreakdown, OccurrenceMatrix, MINUTES_PER_DAY,
};
use crate::geo::{aggregate_trajectories, classify_route, RouteClass, DEFAULT_GAP_SPLIT_S};
use crate::recordings::{read_cam_log, write_cam_log, ParseSummary};
use crate::scenario::{ScenarioConfig, DEFAULT_EPOCH_START_MS};
use crate::sim::{run_scenario, EventKind, EventLog, SimError};
use crate::synth::{generate_recording, SynthConfig};
use crate::v2x::{CamMessage, GeoPosition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const OUT_DIR_ENV: &str = "RSU_ORCHSIM_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

fn input(msg: impl std::fmt::Display) -> CliError {
    CliError::Input(msg.to_string())
}

fn write_failed(path: &Path, e: io::Error) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "rsu-orchsim",
    version,
    about = "Demand-driven roadside unit orchestration simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct OutDir {
    /// Output directory.
    #[arg(long = "out-dir", env = OUT_DIR_ENV, default_value = "./out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct Site {
    #[arg(long = "intersection-lat", allow_negative_numbers = true)]
    pub intersection_lat: f64,
    #[arg(long = "intersection-lon", allow_negative_numbers = true)]
    pub intersection_lon: f64,
    #[arg(long = "relevance-radius-m", default_value_t = 300.0)]
    pub relevance_radius_m: f64,
    /// Minutes east of UTC used for local calendar days.
    #[arg(
        long = "timezone-offset-min",
        default_value_t = 60,
        allow_negative_numbers = true
    )]
    pub timezone_offset_min: i32,
    #[arg(long = "gap-split-s", default_value_t = DEFAULT_GAP_SPLIT_S)]
    pub gap_split_s: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or more scenario files.
    Simulate {
        #[arg(required = true)]
        scenario_path: Vec<PathBuf>,
        /// Overrides the seed stored in each scenario.
        #[arg(long = "seed")]
        seed_override: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Classify trajectories and build the occurrence matrix of a CAM log.
    Analyze {
        recording_path: PathBuf,
        #[command(flatten)]
        site: Site,
        #[command(flatten)]
        out: OutDir,
    },
    /// Distance a geofence must reach out to.
    DimensionGeofence {
        #[arg(long = "speed-kmh", allow_negative_numbers = true)]
        speed_kmh: f64,
        #[arg(long = "e2e-s")]
        e2e_s: f64,
        #[arg(long = "planning-horizon-s", default_value_t = 0.0)]
        planning_horizon_s: f64,
        #[arg(long = "max-range-m", default_value_t = crate::channel::DEFAULT_RANGE_M)]
        max_range_m: f64,
    },
    /// Avoidable energy of an always-on pipeline for a CAM log.
    Energy {
        recording_path: PathBuf,
        #[command(flatten)]
        site: Site,
        #[arg(long = "power-w", default_value_t = 45.0)]
        power_w: f64,
        #[arg(long, default_value_t = 4)]
        units: u32,
        #[arg(long = "buffer-min", default_value_t = 1)]
        buffer_min: usize,
        /// First local day to account for; defaults to the recording's span.
        #[arg(long = "start-date")]
        start_date: Option<NaiveDate>,
        #[arg(long)]
        days: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Write a seeded synthetic week of CAM traffic.
    GenerateRecording {
        output: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 69_610)]
        rows: usize,
        #[arg(long, default_value_t = 714)]
        stations: usize,
    },
}

/// Parses `args` and runs the command, printing diagnostics to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            scenario_path,
            seed_override,
            jobs,
            out,
        } => {
            let outcome = cmd_simulate(&scenario_path, seed_override, &out.out_dir, jobs)?;
            print!("{}", outcome.table);
            Ok(())
        }
        Command::Analyze {
            recording_path,
            site,
            out,
        } => {
            let a = cmd_analyze(&recording_path, &site, &out.out_dir)?;
            print!("{}", a.summary_text());
            Ok(())
        }
        Command::DimensionGeofence {
            speed_kmh,
            e2e_s,
            planning_horizon_s,
            max_range_m,
        } => {
            let d = cmd_dimension_geofence(speed_kmh, e2e_s, planning_horizon_s, max_range_m)?;
            println!("{}", d.line());
            Ok(())
        }
        Command::Energy {
            recording_path,
            site,
            power_w,
            units,
            buffer_min,
            start_date,
            days,
            out,
        } => {
            let model = EnergyModel {
                extra_power_per_unit_w: power_w,
                n_units: units,
                buffer_min,
            };
            let span = match (start_date, days) {
                (Some(s), d) => Some((s, d.unwrap_or(1))),
                (None, Some(_)) => return Err(input("--days needs --start-date")),
                (None, None) => None,
            };
            let report = cmd_energy(&recording_path, &site, &model, span, &out.out_dir)?;
            print!("{}", report.to_key_value());
            Ok(())
        }
        Command::GenerateRecording {
            output,
            seed,
            rows,
            stations,
        } => {
            let n = cmd_generate_recording(&output, seed, rows, stations)?;
            println!("wrote {n} records to {}", output.display());
            Ok(())
        }
    }
}

// ---- simulate ----

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub out_dir: PathBuf,
    pub breakdown: Option<LatencyBreakdown>,
    pub events: usize,
    pub deployed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutcome {
    pub runs: Vec<ScenarioOutcome>,
    pub table: String,
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    ScenarioConfig::from_toml_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn run_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn simulate_one(
    path: &Path,
    cfg: &ScenarioConfig,
    seed: u64,
    out_root: &Path,
) -> Result<ScenarioOutcome, CliError> {
    let log = run_scenario(cfg, seed).map_err(|e| match e {
        SimError::InvalidScenario(e) => input(format!("{}: {e}", path.display())),
        other => CliError::Internal(format!("{}: {other}", path.display())),
    })?;
    let name = run_name(path);
    let dir = out_root.join(&name);
    fs::create_dir_all(&dir).map_err(|e| write_failed(&dir, e))?;

    let log_path = dir.join("event_log.jsonl");
    let file = File::create(&log_path).map_err(|e| write_failed(&log_path, e))?;
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| write_failed(&log_path, e))?;

    let breakdown = decompose(&log).ok();
    let deployed_s = deployed_seconds(&log, cfg.end_time_s);
    let report = run_report(&name, seed, &log, breakdown, deployed_s, cfg);
    let report_path = dir.join("latency_breakdown.txt");
    fs::write(&report_path, report).map_err(|e| write_failed(&report_path, e))?;
    let rows: Vec<_> = breakdown.map(|b| (name.clone(), b)).into_iter().collect();
    let csv_path = dir.join("latency_breakdown.csv");
    fs::write(&csv_path, latency_csv(&rows)).map_err(|e| write_failed(&csv_path, e))?;

    Ok(ScenarioOutcome {
        name,
        out_dir: dir,
        breakdown,
        events: log.len(),
        deployed_s,
    })
}

fn run_report(
    name: &str,
    seed: u64,
    log: &EventLog,
    breakdown: Option<LatencyBreakdown>,
    deployed_s: f64,
    cfg: &ScenarioConfig,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario={name}");
    let _ = writeln!(out, "seed={seed}");
    let _ = writeln!(out, "events={}", log.len());
    match breakdown {
        Some(b) => {
            let _ = writeln!(out, "end_to_end_s={:.6}", b.end_to_end_s);
            let _ = writeln!(out, "manager_processing_s={:.6}", b.manager_processing_s);
            let _ = writeln!(out, "deployment_s={:.6}", b.deployment_s);
            let _ = writeln!(out, "other_s={:.6}", b.other_s);
        }
        None => {
            let _ = writeln!(out, "end_to_end_s=none");
        }
    }
    for kind in [
        EventKind::RequestIssued,
        EventKind::PodCreated,
        EventKind::PipelineReady,
        EventKind::CpmDelivered,
        EventKind::Teardown,
    ] {
        let _ = writeln!(out, "count_{kind:?}={}", log.count(kind));
    }
    let model = EnergyModel {
        n_units: cfg.perception_rsus().len().max(1) as u32,
        ..EnergyModel::default()
    };
    let _ = writeln!(out, "deployed_s={deployed_s:.6}");
    let _ = writeln!(
        out,
        "extra_energy_wh={:.6}",
        simulated_extra_energy_wh(log, cfg.end_time_s, &model)
    );
    out
}

/// Runs every scenario (up to `jobs` at a time), writing
/// `<out_dir>/<file stem>/{event_log.jsonl, latency_breakdown.txt,
/// latency_breakdown.csv}` plus `<out_dir>/latency_table.{txt,csv}`.
///
/// All files are parsed and validated before anything runs.
pub fn cmd_simulate(
    scenario_paths: &[PathBuf],
    seed_override: Option<u64>,
    out_dir: &Path,
    jobs: usize,
) -> Result<SimulateOutcome, CliError> {
    let configs = scenario_paths
        .iter()
        .map(|p| {
            load_scenario(p).and_then(|c| {
                c.validate()
                    .map(|_| c)
                    .map_err(|e| input(format!("{}: {e}", p.display())))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut names = BTreeSet::new();
    for p in scenario_paths {
        if !names.insert(run_name(p)) {
            return Err(input(format!(
                "two scenarios would write to the same directory `{}`",
                run_name(p)
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| write_failed(out_dir, e))?;

    let work: Vec<_> = scenario_paths.iter().zip(&configs).collect();
    let jobs = jobs.clamp(1, work.len().max(1));
    let mut results: Vec<Option<Result<ScenarioOutcome, CliError>>> =
        (0..work.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = work.len().div_ceil(jobs).max(1);
        for (slots, items) in results.chunks_mut(chunk).zip(work.chunks(chunk)) {
            s.spawn(move || {
                for (slot, (path, cfg)) in slots.iter_mut().zip(items) {
                    let seed = seed_override.unwrap_or(cfg.seed);
                    *slot = Some(simulate_one(path, cfg, seed, out_dir));
                }
            });
        }
    });
    let runs = results
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<_> = runs
        .iter()
        .filter_map(|r| r.breakdown.map(|b| (r.name.clone(), b)))
        .collect();
    let mut table = latency_table(&rows);
    for r in runs.iter().filter(|r| r.breakdown.is_none()) {
        let _ = writeln!(
            table,
            "{:<12} no trigger-to-CPM cycle ({} events)",
            r.name, r.events
        );
    }
    let p = out_dir.join("latency_table.txt");
    fs::write(&p, &table).map_err(|e| write_failed(&p, e))?;
    let p = out_dir.join("latency_table.csv");
    fs::write(&p, latency_csv(&rows)).map_err(|e| write_failed(&p, e))?;
    Ok(SimulateOutcome { runs, table })
}

// ---- analyze / energy ----

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub parse: ParseSummary,
    pub distinct_stations: usize,
    pub trajectories: usize,
    pub route_counts: BTreeMap<RouteClass, usize>,
    pub relevant_stations: usize,
    pub matrix: OccurrenceMatrix,
    /// Local days touched by any CAM in the recording.
    pub recording_days: Option<(NaiveDate, NaiveDate)>,
}

impl Analysis {
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ok_count={}", self.parse.ok_count);
        let _ = writeln!(out, "rejected_count={}", self.parse.rejected_count);
        let _ = writeln!(
            out,
            "first_error_line={}",
            self.parse
                .first_error_line
                .map_or("none".to_string(), |l| l.to_string())
        );
        let _ = writeln!(out, "distinct_stations={}", self.distinct_stations);
        let _ = writeln!(out, "trajectories={}", self.trajectories);
        let _ = writeln!(out, "relevant_stations={}", self.relevant_stations);
        let _ = writeln!(out, "matrix_days={}", self.matrix.days().len());
        out
    }

    pub fn route_counts_csv(&self) -> String {
        let mut out = String::from("route_class,count\n");
        for (class, n) in &self.route_counts {
            let _ = writeln!(out, "{class},{n}");
        }
        out
    }
}

/// Streams `path` and classifies every trajectory against the site.
pub fn analyze_recording(path: &Path, site: &Site) -> Result<Analysis, CliError> {
    let intersection = GeoPosition::from_degrees(site.intersection_lat, site.intersection_lon)
        .map_err(|e| input(format!("intersection: {e}")))?;
    if !(site.relevance_radius_m > 0.0) {
        return Err(input("--relevance-radius-m must be positive"));
    }
    if !(site.gap_split_s > 0.0) {
        return Err(input("--gap-split-s must be positive"));
    }
    let file =
        File::open(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let mut reader = read_cam_log(BufReader::new(file));
    let cams: Vec<CamMessage> = reader.by_ref().map(|r| r.cam).collect();
    if let Some(e) = reader.take_io_error() {
        return Err(input(format!("cannot read {}: {e}", path.display())));
    }
    let parse = reader.summary();

    let distinct_stations = cams
        .iter()
        .map(|c| c.station_id)
        .collect::<BTreeSet<_>>()
        .len();
    let recording_days = cams
        .iter()
        .map(|c| local_minute(c.generation_time_ms, site.timezone_offset_min).0)
        .fold(None, |acc: Option<(NaiveDate, NaiveDate)>, d| match acc {
            None => Some((d, d)),
            Some((a, b)) => Some((a.min(d), b.max(d))),
        });

    let trajectories = aggregate_trajectories(&cams, site.gap_split_s);
    let mut route_counts: BTreeMap<RouteClass, usize> =
        RouteClass::ALL.iter().map(|&c| (c, 0)).collect();
    let mut matrix = OccurrenceMatrix::default();
    let mut relevant = BTreeSet::new();
    for t in &trajectories {
        let class = classify_route(t, intersection, site.relevance_radius_m)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        *route_counts.entry(class).or_insert(0) += 1;
        if class != RouteClass::Irrelevant {
            relevant.insert(t.station_id);
            for p in &t.points {
                let (date, minute) = local_minute(p.time_ms, site.timezone_offset_min);
                matrix.mark(date, minute);
            }
        }
    }
    Ok(Analysis {
        parse,
        distinct_stations,
        trajectories: trajectories.len(),
        route_counts,
        relevant_stations: relevant.len(),
        matrix,
        recording_days,
    })
}

/// Writes `route_counts.csv`, `occurrence_matrix.csv` and
/// `parse_summary.txt` to `out_dir`.
pub fn cmd_analyze(
    recording_path: &Path,
    site: &Site,
    out_dir: &Path,
) -> Result<Analysis, CliError> {
    let a = analyze_recording(recording_path, site)?;
    fs::create_dir_all(out_dir).map_err(|e| write_failed(out_dir, e))?;
    for (name, body) in [
        ("route_counts.csv", a.route_counts_csv()),
        ("occurrence_matrix.csv", a.matrix.to_csv()),
        ("parse_summary.txt", a.summary_text()),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| write_failed(&p, e))?;
    }
    Ok(a)
}

/// Occurrence matrix padded to the accounting span and its energy report.
/// Days without relevant traffic count as fully idle; a recording with no
/// CAMs at all covers one idle day unless `span` pins the range.
pub fn energy_for_recording(
    recording_path: &Path,
    site: &Site,
    model: &EnergyModel,
    span: Option<(NaiveDate, usize)>,
) -> Result<(OccurrenceMatrix, EnergyReport), CliError> {
    model.validate().map_err(input)?;
    if span.is_some_and(|(_, d)| d == 0) {
        return Err(input("--days must be at least 1"));
    }
    let a = analyze_recording(recording_path, site)?;
    let mut matrix = a.matrix;
    match (span, a.recording_days) {
        (Some((start, days)), _) => {
            let mut pinned = OccurrenceMatrix::empty(start, days);
            for (d, &date) in matrix.days().iter().enumerate() {
                if pinned.days().contains(&date) {
                    for m in 0..MINUTES_PER_DAY {
                        if matrix.is_set(d, m) {
                            pinned.mark(date, m);
                        }
                    }
                }
            }
            matrix = pinned;
        }
        (None, Some((first, last))) => {
            matrix.extend_to_span(first, (last - first).num_days() as usize + 1)
        }
        (None, None) => {
            let (day, _) = local_minute(DEFAULT_EPOCH_START_MS, site.timezone_offset_min);
            matrix.extend_to_span(day, 1)
        }
    }
    let report = energy_report(&matrix, model).map_err(input)?;
    Ok((matrix, report))
}

/// Writes `energy_report.txt`, `energy_per_day.csv` and
/// `occurrence_matrix.csv` to `out_dir`.
pub fn cmd_energy(
    recording_path: &Path,
    site: &Site,
    model: &EnergyModel,
    span: Option<(NaiveDate, usize)>,
    out_dir: &Path,
) -> Result<EnergyReport, CliError> {
    let (matrix, report) = energy_for_recording(recording_path, site, model, span)?;

    fs::create_dir_all(out_dir).map_err(|e| write_failed(out_dir, e))?;
    let p = out_dir.join("energy_report.txt");
    fs::write(&p, report.to_key_value()).map_err(|e| write_failed(&p, e))?;
    let occ = matrix.occurrence_minutes();
    let active = active_minutes(&matrix, model.buffer_min);
    let mut csv = String::from("date,occurrence_min,active_min,inactive_min\n");
    for ((d, o), act) in matrix.days().iter().zip(&occ).zip(&active) {
        let _ = writeln!(csv, "{d},{o},{act},{}", MINUTES_PER_DAY - act);
    }
    let p = out_dir.join("energy_per_day.csv");
    fs::write(&p, csv).map_err(|e| write_failed(&p, e))?;
    let p = out_dir.join("occurrence_matrix.csv");
    fs::write(&p, matrix.to_csv()).map_err(|e| write_failed(&p, e))?;
    Ok(report)
}

// ---- geofence ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensioning {
    pub distance_m: f64,
    pub max_range_m: f64,
    pub pass: bool,
}

impl Dimensioning {
    pub fn line(&self) -> String {
        format!(
            "geofence_distance_m={:.1} max_range_m={:.1} {}",
            self.distance_m,
            self.max_range_m,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn cmd_dimension_geofence(
    speed_kmh: f64,
    e2e_s: f64,
    planning_horizon_s: f64,
    max_range_m: f64,
) -> Result<Dimensioning, CliError> {
    if !(e2e_s >= 0.0) || !(planning_horizon_s >= 0.0) {
        return Err(input("latency and planning horizon must be non-negative"));
    }
    let distance_m = geofence_distance(speed_kmh, e2e_s, planning_horizon_s).map_err(input)?;
    Ok(Dimensioning {
        distance_m,
        max_range_m,
        pass: distance_m <= max_range_m,
    })
}

pub fn cmd_generate_recording(
    output: &Path,
    seed: u64,
    rows: usize,
    stations: usize,
) -> Result<u64, CliError> {
    let cfg = SynthConfig {
        seed,
        total_rows: rows,
        total_stations: stations,
        ..SynthConfig::default()
    };
    let synth = generate_recording(&cfg).map_err(input)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| write_failed(parent, e))?;
    }
    let file = File::create(output).map_err(|e| write_failed(output, e))?;
    write_cam_log(&synth.records, BufWriter::new(file)).map_err(|e| write_failed(output, e))
}
