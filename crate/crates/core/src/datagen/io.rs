//! Dataset persistence: manifest JSON plus a traces CSV, and an external
//! CSV loader that overlays synthetic clock distortion on real telemetry.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::trace::{
    compute_time_features, diagnostic_embedding, diagnostic_matrix, start_epoch_for,
};
use super::{
    Dataset, DatagenError, DatasetManifest, DeviceTrace, ScenarioSpec, TraceRow, FORMAT_VERSION,
};
use crate::clockdyn::{
    compose_timestamp, distortion, offset_step, ou_drift_step, overflow_indicator, ClockParams,
    ClockState, TimeConstants,
};
use crate::rng::{substream, StreamKind};
use rand::Rng;
use rand_distr::Distribution;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACES_FILE: &str = "traces.csv";

fn csv_header(n_features: usize) -> String {
    let mut cols = vec!["device_id".to_string(), "t".to_string(), "tau".to_string()];
    cols.extend((1..=n_features).map(|i| format!("x_{i}")));
    cols.extend(
        [
            "dt",
            "delta",
            "eta",
            "overflow",
            "timestamp_drift",
            "drift_rate",
            "jitter_ms",
            "ntp_offset_ms",
            "epoch_overflow_flag",
            "label",
            "k_diag",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols.join(",")
}

/// Write `manifest.json` and `traces.csv` under `dir`. Floats use the
/// shortest round-trip decimal form, so a load restores them bit-exactly.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatagenError> {
    std::fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;

    let n_features = dataset.manifest.normalization.names.len() - 7;
    let file = std::fs::File::create(dir.join(TRACES_FILE))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", csv_header(n_features))?;
    for trace in &dataset.traces {
        for row in &trace.rows {
            write!(out, "{},{},{}", trace.device_id, row.step, row.tau)?;
            for v in &row.x {
                write!(out, ",{v}")?;
            }
            write!(out, ",{},{},{},{}", row.d[0], row.d[1], row.d[2], row.d[3])?;
            for v in &row.time_features {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{},{}", row.label, row.k_diag)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatagenError> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatagenError::VersionMismatch {
            expected: FORMAT_VERSION,
            got: manifest.format_version,
        });
    }
    let n_features = manifest.normalization.names.len() - 7;
    let expected_header = csv_header(n_features);
    let text = std::fs::read_to_string(dir.join(TRACES_FILE))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DatagenError::MalformedRow {
        line: 1,
        msg: "missing header".into(),
    })?;
    if header != expected_header {
        return Err(DatagenError::MalformedRow {
            line: 1,
            msg: format!("unexpected header: {header}"),
        });
    }

    let mut per_device: Vec<Vec<TraceRow>> = vec![Vec::new(); manifest.n_devices];
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_features + 14 {
            return Err(DatagenError::MalformedRow {
                line: line_no,
                msg: format!("expected {} fields, got {}", n_features + 14, fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, DatagenError> {
            s.parse::<f64>().map_err(|e| DatagenError::MalformedRow {
                line: line_no,
                msg: format!("bad {what} `{s}`: {e}"),
            })
        };
        let parse_u = |s: &str, what: &str| -> Result<usize, DatagenError> {
            s.parse::<usize>().map_err(|e| DatagenError::MalformedRow {
                line: line_no,
                msg: format!("bad {what} `{s}`: {e}"),
            })
        };
        let device = parse_u(fields[0], "device_id")?;
        if device >= manifest.n_devices {
            return Err(DatagenError::MalformedRow {
                line: line_no,
                msg: format!("device {device} out of range"),
            });
        }
        let step = parse_u(fields[1], "t")?;
        let tau = parse_f(fields[2], "tau")?;
        let mut x = Vec::with_capacity(n_features);
        for i in 0..n_features {
            x.push(parse_f(fields[3 + i], &format!("x_{}", i + 1))?);
        }
        let base = 3 + n_features;
        let d = [
            parse_f(fields[base], "dt")?,
            parse_f(fields[base + 1], "delta")?,
            parse_f(fields[base + 2], "eta")?,
            parse_f(fields[base + 3], "overflow")?,
        ];
        let time_features = [
            parse_f(fields[base + 4], "timestamp_drift")?,
            parse_f(fields[base + 5], "drift_rate")?,
            parse_f(fields[base + 6], "jitter_ms")?,
            parse_f(fields[base + 7], "ntp_offset_ms")?,
            parse_f(fields[base + 8], "epoch_overflow_flag")?,
        ];
        let label = parse_u(fields[base + 9], "label")? as u8;
        let k_diag = parse_f(fields[base + 10], "k_diag")?;
        per_device[device].push(TraceRow {
            step,
            x,
            d,
            tau,
            psi: time_features[0],
            time_features,
            label,
            k_diag,
        });
    }

    let constants = TimeConstants {
        dt: manifest.dt,
        ..Default::default()
    };
    let traces: Vec<DeviceTrace> = per_device
        .into_iter()
        .enumerate()
        .map(|(device_id, rows)| DeviceTrace {
            device_id,
            scenario: manifest.scenarios[device_id],
            start_epoch: start_epoch_for(&manifest.scenarios[device_id], &constants),
            rows,
        })
        .collect();
    Ok(Dataset { manifest, traces })
}

/// Column names for the external loader.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMap {
    pub timestamp: String,
    pub features: Vec<String>,
    pub device: Option<String>,
    pub label: Option<String>,
}

/// Ingest external telemetry and overlay synthetic clock distortion on its
/// reporting layer. CSV timestamps are taken as true time; the overlay
/// produces reported timestamps and the drift-input columns.
pub fn load_external_csv(
    path: &Path,
    columns: &ColumnMap,
    clock: &ClockParams,
    constants: &TimeConstants,
    seed: u64,
) -> Result<Vec<DeviceTrace>, DatagenError> {
    clock.validate().map_err(DatagenError::InvalidConfig)?;
    constants.validate().map_err(DatagenError::InvalidConfig)?;
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, DatagenError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatagenError::MissingColumn(name.to_string()))
    };
    let ts_idx = find(&columns.timestamp)?;
    let feature_idx: Vec<usize> = columns
        .features
        .iter()
        .map(|f| find(f))
        .collect::<Result<_, _>>()?;
    let device_idx = columns.device.as_deref().map(find).transpose()?;
    let label_idx = columns.label.as_deref().map(find).transpose()?;

    struct Parsed {
        device: usize,
        t: f64,
        x: Vec<f64>,
        label: u8,
    }
    let mut parsed: Vec<Parsed> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        let get_f = |idx: usize, what: &str| -> Result<f64, DatagenError> {
            record
                .get(idx)
                .ok_or_else(|| DatagenError::MalformedRow {
                    line,
                    msg: format!("missing field {what}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| DatagenError::MalformedRow {
                    line,
                    msg: format!("bad {what}: {e}"),
                })
        };
        let t = get_f(ts_idx, &columns.timestamp)?;
        let x: Vec<f64> = feature_idx
            .iter()
            .zip(&columns.features)
            .map(|(&i, name)| get_f(i, name))
            .collect::<Result<_, _>>()?;
        let device = match device_idx {
            Some(i) => get_f(i, "device")? as usize,
            None => 0,
        };
        let label = match label_idx {
            Some(i) => u8::from(get_f(i, "label")? != 0.0),
            None => 0,
        };
        parsed.push(Parsed { device, t, x, label });
    }
    if parsed.is_empty() {
        return Err(DatagenError::InvalidConfig("external CSV has no rows".into()));
    }

    let n_features = columns.features.len();
    let w_diag: Array2<f64> = diagnostic_matrix(n_features, seed);

    let mut device_ids: Vec<usize> = parsed.iter().map(|p| p.device).collect();
    device_ids.sort_unstable();
    device_ids.dedup();

    let mut traces = Vec::new();
    for device in device_ids {
        let rows_in: Vec<&Parsed> = parsed.iter().filter(|p| p.device == device).collect();
        let mut rng = substream(seed, device as u64, StreamKind::Clock);
        let normal = rand_distr::StandardNormal;
        let t_first = rows_in[0].t;
        let start_epoch = t_first - constants.dt;
        let mut state = ClockState::initial(start_epoch);
        let mut t_prev = start_epoch;
        let mut rows = Vec::with_capacity(rows_in.len());
        for (k, p) in rows_in.iter().enumerate() {
            let dt_k = (p.t - t_prev).max(f64::MIN_POSITIVE);
            let eps: f64 = normal.sample(&mut rng);
            let drift = ou_drift_step(state.drift, clock, dt_k, eps);
            let u: f64 = rng.random();
            let nu: f64 = normal.sample(&mut rng);
            let offset = offset_step(state.offset, clock, u, nu);
            let overflow = state.overflow || overflow_indicator(state.tau_prev, constants.t0) == 1;
            let next = ClockState {
                drift,
                offset,
                overflow,
                tau_prev: state.tau_prev,
            };
            let tau = compose_timestamp(p.t, &next, constants.t0);
            let psi = distortion(tau, p.t);
            let d = [tau - state.tau_prev, drift, offset, f64::from(overflow)];
            let (_z, k_diag) = diagnostic_embedding(&p.x, &d, &w_diag)?;
            rows.push(TraceRow {
                step: k,
                x: p.x.clone(),
                d,
                tau,
                psi,
                time_features: [0.0; 5],
                label: p.label,
                k_diag,
            });
            t_prev = p.t;
            state = ClockState { tau_prev: tau, ..next };
        }
        compute_time_features(&mut rows, constants.dt);
        traces.push(DeviceTrace {
            device_id: device,
            scenario: ScenarioSpec::nominal(),
            start_epoch,
            rows,
        });
    }
    Ok(traces)
}
