//! Drift-aware dataset construction: nominal physical telemetry, clock
//! distortion scenarios, time-aware features, device graph, windowing,
//! device-level splits and (de)serialization.

mod graph;
mod io;
mod physical;
mod trace;
mod windows;

pub use graph::{build_graph, DeviceGraph, GraphTopology};
pub use io::{load_dataset, load_external_csv, save_dataset, ColumnMap};
pub use physical::{synth_physical, temperature_coupling, PhysicalConfig};
pub use trace::{
    build_device_trace, compute_time_features, diagnostic_embedding, diagnostic_matrix,
    embedding_curvature, reindex_by_reported_time, start_epoch_for, DeviceTrace, TraceRow,
};
pub use windows::{
    make_windows, normalize_apply, normalize_fit, split_by_device, window_matrix, DeviceWindows,
    NormStats, Split,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clockdyn::{ClockParams, TimeConstants};
use crate::rng::{self, StreamKind};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("scenario onset {onset} is outside the trace length {len}")]
    OnsetOutOfRange { onset: usize, len: usize },
    #[error("scenario magnitude must be >= 0, got {0}")]
    NegativeMagnitude(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("window spec invalid: window {window}, stride {stride}, trace length {len}")]
    BadWindowSpec {
        window: usize,
        stride: usize,
        len: usize,
    },
    #[error("need at least {need} devices, got {got}")]
    TooFewDevices { need: usize, got: usize },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("dataset format version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How a device's reporting layer is corrupted, and when.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Nominal,
    DriftEscalation,
    OffsetShock,
    EpochOverflow,
    StealthyDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Step index at which the scenario activates.
    pub onset: usize,
    /// Scenario strength: shock seconds, escalation factor, or stealth ramp
    /// seconds per step, depending on the kind.
    pub magnitude: f64,
    /// Stealth cap on the per-step distortion increment, seconds.
    pub eps_t: f64,
    /// Stealth cap on the per-step drift gradient, seconds.
    pub eps_d: f64,
}

impl ScenarioSpec {
    pub fn nominal() -> Self {
        Self {
            kind: ScenarioKind::Nominal,
            onset: 0,
            magnitude: 0.0,
            eps_t: 0.001,
            eps_d: 0.001,
        }
    }

    pub fn is_nominal(&self) -> bool {
        self.kind == ScenarioKind::Nominal
    }

    pub fn validate(&self, trace_len: usize) -> Result<(), DatagenError> {
        if !self.is_nominal() && self.onset >= trace_len {
            return Err(DatagenError::OnsetOutOfRange {
                onset: self.onset,
                len: trace_len,
            });
        }
        if self.magnitude < 0.0 || !self.magnitude.is_finite() {
            return Err(DatagenError::NegativeMagnitude(self.magnitude));
        }
        if self.kind == ScenarioKind::StealthyDrift && !(self.eps_t > 0.0 && self.eps_d > 0.0) {
            return Err(DatagenError::InvalidConfig(format!(
                "stealthy drift needs positive caps, got eps_t={}, eps_d={}",
                self.eps_t, self.eps_d
            )));
        }
        Ok(())
    }
}

/// Whole-dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub trace_length: usize,
    pub dt: f64,
    pub window: usize,
    pub stride: usize,
    pub split_fractions: (f64, f64, f64),
    /// Fraction of devices that receive a timing scenario, applied per split
    /// with at least one perturbed device in train and test.
    pub perturbed_fraction: f64,
    pub physical: PhysicalConfig,
    pub clock: ClockParams,
    /// Scenario kinds cycled over perturbed devices.
    pub scenario_kinds: Vec<ScenarioKind>,
    /// Onset drawn uniformly in this fraction range of the trace.
    pub onset_range: (f64, f64),
    pub shock_magnitude: f64,
    pub drift_escalation_factor: f64,
    pub stealth_ramp: f64,
    pub stealth_eps_t: f64,
    pub stealth_eps_d: f64,
    pub graph: GraphTopology,
    /// Explicit per-device scenario overrides; device indices must exist.
    pub explicit_scenarios: Vec<(usize, ScenarioSpec)>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_devices: 12,
            trace_length: 5000,
            dt: 1.0,
            window: 60,
            stride: 30,
            split_fractions: (0.7, 0.1, 0.2),
            perturbed_fraction: 0.25,
            physical: PhysicalConfig::default(),
            clock: ClockParams::default(),
            scenario_kinds: vec![
                ScenarioKind::OffsetShock,
                ScenarioKind::EpochOverflow,
                ScenarioKind::DriftEscalation,
            ],
            onset_range: (0.25, 0.75),
            shock_magnitude: 5.0,
            drift_escalation_factor: 30.0,
            stealth_ramp: 0.0008,
            stealth_eps_t: 0.001,
            stealth_eps_d: 0.001,
            graph: GraphTopology::KNearest { k: 3 },
            explicit_scenarios: Vec::new(),
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_devices < 3 {
            return Err(DatagenError::TooFewDevices {
                need: 3,
                got: self.n_devices,
            });
        }
        if self.trace_length < self.window || self.window == 0 || self.stride == 0 {
            return Err(DatagenError::BadWindowSpec {
                window: self.window,
                stride: self.stride,
                len: self.trace_length,
            });
        }
        if !(self.dt > 0.0) {
            return Err(DatagenError::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        let (a, b, c) = self.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() < 1e-9) {
            return Err(DatagenError::InvalidConfig(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split_fractions
            )));
        }
        if !(0.0..=1.0).contains(&self.perturbed_fraction) {
            return Err(DatagenError::InvalidConfig(format!(
                "perturbed_fraction must be in [0, 1], got {}",
                self.perturbed_fraction
            )));
        }
        if self.scenario_kinds.is_empty() {
            return Err(DatagenError::InvalidConfig(
                "scenario_kinds must not be empty".into(),
            ));
        }
        let (lo, hi) = self.onset_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(DatagenError::InvalidConfig(format!(
                "onset_range must satisfy 0 <= lo <= hi < 1, got {:?}",
                self.onset_range
            )));
        }
        self.physical
            .validate()
            .map_err(DatagenError::InvalidConfig)?;
        self.clock.validate().map_err(DatagenError::InvalidConfig)?;
        for (device, spec) in &self.explicit_scenarios {
            if *device >= self.n_devices {
                return Err(DatagenError::InvalidConfig(format!(
                    "explicit scenario references device {device}, but there are {} devices",
                    self.n_devices
                )));
            }
            spec.validate(self.trace_length)?;
        }
        Ok(())
    }
}

/// Dataset description persisted alongside the traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_devices: usize,
    pub trace_length: usize,
    pub dt: f64,
    pub window: usize,
    pub stride: usize,
    /// Split per device, indexed by device id.
    pub split_assignment: Vec<Split>,
    /// Per-feature statistics fitted on training devices only.
    pub normalization: NormStats,
    /// Scenario per device, indexed by device id.
    pub scenarios: Vec<ScenarioSpec>,
    pub graph: GraphRepr,
}

pub const FORMAT_VERSION: u32 = 1;

/// Graph as embedded in the manifest: `{"n": .., "edges": [[i, j, w], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRepr {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl From<&DeviceGraph> for GraphRepr {
    fn from(g: &DeviceGraph) -> Self {
        Self {
            n: g.n_nodes,
            edges: g.edges.clone(),
        }
    }
}

impl GraphRepr {
    pub fn to_graph(&self) -> DeviceGraph {
        DeviceGraph {
            n_nodes: self.n,
            edges: self.edges.clone(),
            symmetric: true,
        }
    }
}

/// A generated dataset: manifest plus one trace per device.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub traces: Vec<DeviceTrace>,
}

impl Dataset {
    pub fn devices_in(&self, split: Split) -> Vec<usize> {
        self.manifest
            .split_assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn graph(&self) -> DeviceGraph {
        self.manifest.graph.to_graph()
    }
}

/// Run the full construction pipeline: splits, scenario assignment, physical
/// synthesis, clock distortion, features, graph and normalization statistics.
pub fn generate_dataset(config: &GenerateConfig) -> Result<Dataset, DatagenError> {
    config.validate()?;
    let constants = TimeConstants {
        dt: config.dt,
        ..Default::default()
    };

    let device_ids: Vec<usize> = (0..config.n_devices).collect();
    let split_assignment = split_by_device(&device_ids, config.split_fractions, config.seed)?;
    let scenarios = assign_scenarios(config, &split_assignment);

    let w_diag = diagnostic_matrix(config.physical.n_features, config.seed);

    let mut traces = Vec::with_capacity(config.n_devices);
    for device in 0..config.n_devices {
        let phys = synth_physical(
            &config.physical,
            config.trace_length,
            config.seed,
            device as u64,
        )?;
        let trace = build_device_trace(
            &phys,
            &config.clock,
            &scenarios[device],
            &constants,
            config.seed,
            device as u64,
            &w_diag,
        )?;
        traces.push(trace);
    }

    let graph = build_graph(config.n_devices, &config.graph, config.seed)?;

    let train_rows: Vec<&TraceRow> = traces
        .iter()
        .filter(|t| split_assignment[t.device_id] == Split::Train)
        .flat_map(|t| t.rows.iter())
        .collect();
    let normalization = normalize_fit(&train_rows, config.physical.n_features);

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        n_devices: config.n_devices,
        trace_length: config.trace_length,
        dt: config.dt,
        window: config.window,
        stride: config.stride,
        split_assignment,
        normalization,
        scenarios,
        graph: GraphRepr::from(&graph),
    };

    Ok(Dataset { manifest, traces })
}

/// Pick perturbed devices per split and cycle scenario kinds over them.
/// Train and test each get at least one perturbed device whenever the
/// fraction is positive, so evaluation labels are never single-class, and
/// the train split covers every configured kind whenever it is large
/// enough, so no held-out device carries a signature the model never saw.
/// The kind rotation starts at a seed-dependent offset, so the test
/// scenario varies across seeds.
fn assign_scenarios(config: &GenerateConfig, splits: &[Split]) -> Vec<ScenarioSpec> {
    let mut scenarios = vec![ScenarioSpec::nominal(); config.n_devices];
    let mut kind_cursor = (config.seed % config.scenario_kinds.len() as u64) as usize;
    for split in [Split::Train, Split::Test, Split::Val] {
        let members: Vec<usize> = (0..config.n_devices)
            .filter(|&d| splits[d] == split)
            .collect();
        if members.is_empty() || config.perturbed_fraction == 0.0 {
            continue;
        }
        let raw = config.perturbed_fraction * members.len() as f64;
        let mut count = raw.round() as usize;
        if matches!(split, Split::Train | Split::Test) {
            count = count.max(1);
        }
        if split == Split::Train {
            count = count.max(config.scenario_kinds.len().min(members.len()));
        }
        count = count.min(members.len());
        // Members are in device order; the split itself was a seeded shuffle,
        // so this choice is deterministic yet seed-dependent.
        for &device in members.iter().take(count) {
            let kind = config.scenario_kinds[kind_cursor % config.scenario_kinds.len()];
            kind_cursor += 1;
            let mut rng = rng::substream(config.seed, device as u64, StreamKind::Diag);
            let (lo, hi) = config.onset_range;
            let u: f64 = rand::Rng::random(&mut rng);
            let onset =
                ((lo + (hi - lo) * u) * config.trace_length as f64).floor() as usize;
            let magnitude = match kind {
                ScenarioKind::OffsetShock => config.shock_magnitude,
                ScenarioKind::DriftEscalation => config.drift_escalation_factor,
                ScenarioKind::StealthyDrift => config.stealth_ramp,
                ScenarioKind::EpochOverflow | ScenarioKind::Nominal => 0.0,
            };
            scenarios[device] = ScenarioSpec {
                kind,
                onset,
                magnitude,
                eps_t: config.stealth_eps_t,
                eps_d: config.stealth_eps_d,
            };
        }
    }
    for (device, spec) in &config.explicit_scenarios {
        scenarios[*device] = *spec;
    }
    scenarios
}

/// Seed-derived diagnostic weight used for the dataset-level embedding and
/// curvature columns. Distinct from the learned embedding weight.
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64, kind: StreamKind) -> Array2<f64> {
    let mut rng = rng::global_stream(seed, kind);
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * bound
    })
}
