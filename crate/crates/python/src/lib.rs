//! Python bindings: CAM codec, scenario runs, latency and energy analysis.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use rsu_orchsim::analytics::{self, EnergyModel};
use rsu_orchsim::cli::{self, CliError, Site};
use rsu_orchsim::geo;
use rsu_orchsim::scenario::ScenarioConfig;
use rsu_orchsim::sim::{self, EventKind};
use rsu_orchsim::v2x::{self, CamMessage, GeoPosition, StationId};

const KINDS: [EventKind; 13] = [
    EventKind::CamGenerated,
    EventKind::CamDelivered,
    EventKind::RequestIssued,
    EventKind::ManagerDone,
    EventKind::PodCreated,
    EventKind::StageCompleted,
    EventKind::PipelineReady,
    EventKind::ObjectListSent,
    EventKind::ObjectListDelivered,
    EventKind::FusionDone,
    EventKind::CpmBroadcast,
    EventKind::CpmDelivered,
    EventKind::Teardown,
];

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Input(_) => value_err(e),
        CliError::Internal(_) => PyOSError::new_err(e.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<EventKind> {
    KINDS
        .into_iter()
        .find(|k| format!("{k:?}") == name)
        .ok_or_else(|| value_err(format!("unknown event kind {name:?}")))
}

fn station(id: u32) -> PyResult<StationId> {
    StationId::new(id).map_err(value_err)
}

#[pyclass(name = "Cam", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyCam(CamMessage);

#[pymethods]
impl PyCam {
    #[new]
    fn new(
        station_id: u32,
        generation_time_ms: u64,
        lat_deg: f64,
        lon_deg: f64,
        speed_cms: u16,
        heading_ddeg: u16,
    ) -> PyResult<Self> {
        let pos = GeoPosition::from_degrees(lat_deg, lon_deg).map_err(value_err)?;
        CamMessage::new(
            station(station_id)?,
            generation_time_ms,
            pos,
            speed_cms,
            heading_ddeg,
        )
        .map(PyCam)
        .map_err(value_err)
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        v2x::decode_cam(data).map(PyCam).map_err(value_err)
    }

    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &v2x::encode_cam(&self.0))
    }

    #[getter]
    fn station_id(&self) -> u32 {
        self.0.station_id.get()
    }

    #[getter]
    fn generation_time_ms(&self) -> u64 {
        self.0.generation_time_ms
    }

    #[getter]
    fn lat_deg(&self) -> f64 {
        self.0.position.lat_deg()
    }

    #[getter]
    fn lon_deg(&self) -> f64 {
        self.0.position.lon_deg()
    }

    #[getter]
    fn speed_cms(&self) -> u16 {
        self.0.speed_cms
    }

    #[getter]
    fn heading_ddeg(&self) -> u16 {
        self.0.heading_ddeg
    }

    fn __repr__(&self) -> String {
        format!(
            "Cam(station_id={}, generation_time_ms={}, lat_deg={}, lon_deg={}, speed_cms={}, heading_ddeg={})",
            self.station_id(),
            self.0.generation_time_ms,
            self.lat_deg(),
            self.lon_deg(),
            self.0.speed_cms,
            self.0.heading_ddeg
        )
    }
}

#[pyclass(name = "EventLog", frozen)]
struct PyEventLog(sim::EventLog);

#[pymethods]
impl PyEventLog {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn count(&self, kind: &str) -> PyResult<usize> {
        Ok(self.0.count(parse_kind(kind)?))
    }

    fn to_jsonl(&self) -> String {
        self.0.to_jsonl_string()
    }

    fn first_cpm_latency(&self, station_id: u32) -> PyResult<f64> {
        sim::first_cpm_latency(&self.0, station(station_id)?).map_err(value_err)
    }

    /// End-to-end latency split into manager, deployment and other parts.
    fn decompose<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let b = analytics::decompose(&self.0).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("end_to_end_s", b.end_to_end_s)?;
        d.set_item("manager_processing_s", b.manager_processing_s)?;
        d.set_item("deployment_s", b.deployment_s)?;
        d.set_item("other_s", b.other_s)?;
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (scenario_toml, seed=None))]
fn simulate(py: Python<'_>, scenario_toml: &str, seed: Option<u64>) -> PyResult<PyEventLog> {
    let cfg = ScenarioConfig::from_toml_str(scenario_toml).map_err(value_err)?;
    let seed = seed.unwrap_or(cfg.seed);
    py.detach(|| sim::run_scenario(&cfg, seed))
        .map(PyEventLog)
        .map_err(value_err)
}

#[pyfunction]
fn haversine_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    let a = GeoPosition::from_degrees(lat1, lon1).map_err(value_err)?;
    let b = GeoPosition::from_degrees(lat2, lon2).map_err(value_err)?;
    Ok(geo::haversine_distance(a, b))
}

#[pyfunction]
fn geofence_distance(speed_kmh: f64, e2e_s: f64, planning_horizon_s: f64) -> PyResult<f64> {
    analytics::geofence_distance(speed_kmh, e2e_s, planning_horizon_s).map_err(value_err)
}

#[pyfunction]
fn latency_stats<'py>(py: Python<'py>, samples: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = analytics::latency_stats(&samples).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("mean", s.mean)?;
    d.set_item("median", s.median)?;
    d.set_item("std", s.std)?;
    d.set_item("min", s.min)?;
    d.set_item("max", s.max)?;
    d.set_item("count", s.count)?;
    Ok(d)
}

/// Avoidable energy for a CAM recording; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (
    path, intersection_lat, intersection_lon, relevance_radius_m=300.0,
    timezone_offset_min=60, power_w=45.0, units=4, buffer_min=1,
))]
#[allow(clippy::too_many_arguments)]
fn energy_from_recording<'py>(
    py: Python<'py>,
    path: PathBuf,
    intersection_lat: f64,
    intersection_lon: f64,
    relevance_radius_m: f64,
    timezone_offset_min: i32,
    power_w: f64,
    units: u32,
    buffer_min: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let site = Site {
        intersection_lat,
        intersection_lon,
        relevance_radius_m,
        timezone_offset_min,
        gap_split_s: geo::DEFAULT_GAP_SPLIT_S,
    };
    let model = EnergyModel {
        extra_power_per_unit_w: power_w,
        n_units: units,
        buffer_min,
    };
    let (_, r) = py
        .detach(|| cli::energy_for_recording(&path, &site, &model, None))
        .map_err(cli_err)?;
    let d = PyDict::new(py);
    d.set_item("days", r.days)?;
    d.set_item("n_units", r.n_units)?;
    d.set_item("occurrence_min_per_day", r.occurrence_min_per_day)?;
    d.set_item("active_min_per_day", r.active_min_per_day)?;
    d.set_item("inactive_min_per_day", r.inactive_min_per_day)?;
    d.set_item("wh_per_minute", r.wh_per_minute)?;
    d.set_item("avoidable_wh_per_day", r.avoidable_wh_per_day)?;
    d.set_item("avoidable_kwh_per_year", r.avoidable_kwh_per_year)?;
    Ok(d)
}

/// Writes a synthetic CAM recording; returns the row count.
#[pyfunction]
#[pyo3(signature = (path, seed=7, rows=69_610, stations=714))]
fn generate_recording(
    py: Python<'_>,
    path: PathBuf,
    seed: u64,
    rows: usize,
    stations: usize,
) -> PyResult<u64> {
    py.detach(|| cli::cmd_generate_recording(&path, seed, rows, stations))
        .map_err(cli_err)
}

#[pymodule]
#[pyo3(name = "rsu_orchsim")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCam>()?;
    m.add_class::<PyEventLog>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(geofence_distance, m)?)?;
    m.add_function(wrap_pyfunction!(latency_stats, m)?)?;
    m.add_function(wrap_pyfunction!(energy_from_recording, m)?)?;
    m.add_function(wrap_pyfunction!(generate_recording, m)?)?;
    Ok(())
}
