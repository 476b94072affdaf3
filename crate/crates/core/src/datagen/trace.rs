//! Per-device trace construction: clock recursion, scenario injection,
//! time-aware features and dataset-level diagnostics.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{DatagenError, ScenarioKind, ScenarioSpec};
use crate::clockdyn::{
    compose_timestamp, distortion, offset_step, ou_drift_step, overflow_indicator, ClockParams,
    ClockState, TimeConstants,
};
use crate::rng::{substream, StreamKind};

/// One generated telemetry step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Physical features, in the generator's channel order.
    pub x: Vec<f64>,
    /// Drift embedding input: [reported spacing, drift, offset, rollover].
    pub d: [f64; 4],
    /// Reported timestamp, seconds.
    pub tau: f64,
    /// Reported minus true time, seconds.
    pub psi: f64,
    /// [timestamp_drift, drift_rate, jitter_ms, ntp_offset_ms,
    /// epoch_overflow_flag].
    pub time_features: [f64; 5],
    pub label: u8,
    /// Dataset-level curvature diagnostic.
    pub k_diag: f64,
}

/// All rows of one device plus the scenario that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub device_id: usize,
    pub scenario: ScenarioSpec,
    /// True time of the step before the first row.
    pub start_epoch: f64,
    pub rows: Vec<TraceRow>,
}

/// Diagnostic warped embedding `z = x + W d` and curvature
/// `K = ||W^T W - I||_F` (the Jacobian of the affine map in `d` is `W`).
pub fn diagnostic_embedding(
    x: &[f64],
    d: &[f64; 4],
    w_diag: &Array2<f64>,
) -> Result<(Vec<f64>, f64), DatagenError> {
    if w_diag.nrows() != x.len() || w_diag.ncols() != 4 {
        return Err(DatagenError::ShapeMismatch {
            expected: format!("{}x4", x.len()),
            got: format!("{}x{}", w_diag.nrows(), w_diag.ncols()),
        });
    }
    let mut z = x.to_vec();
    for (r, zi) in z.iter_mut().enumerate() {
        for (c, dc) in d.iter().enumerate() {
            *zi += w_diag[(r, c)] * dc;
        }
    }
    Ok((z, embedding_curvature(w_diag)))
}

/// Frobenius deviation of `W^T W` from the identity.
pub fn embedding_curvature(w: &Array2<f64>) -> f64 {
    let cols = w.ncols();
    let mut acc = 0.0;
    for a in 0..cols {
        for b in 0..cols {
            let mut dot = 0.0;
            for r in 0..w.nrows() {
                dot += w[(r, a)] * w[(r, b)];
            }
            let m = dot - if a == b { 1.0 } else { 0.0 };
            acc += m * m;
        }
    }
    acc.sqrt()
}

/// Seed-derived diagnostic weight for the dataset-level z/K columns.
pub fn diagnostic_matrix(n_features: usize, seed: u64) -> Array2<f64> {
    super::seeded_matrix(n_features, 4, seed, StreamKind::Diag)
}

/// Start epoch implied by a scenario: rollover traces anchor just below the
/// threshold so the reported timestamp crosses it exactly at the onset step
/// (given sub-half-step accumulated distortion). Everything else starts at
/// epoch zero.
pub fn start_epoch_for(scenario: &ScenarioSpec, constants: &TimeConstants) -> f64 {
    if scenario.kind == ScenarioKind::EpochOverflow {
        constants.t0 as f64 - scenario.onset as f64 * constants.dt + 0.5 * constants.dt
    } else {
        0.0
    }
}

/// Generate a device trace by iterating the clock recursion over the
/// physical rows and applying the scenario from its onset.
pub fn build_device_trace(
    phys: &Array2<f64>,
    clock: &ClockParams,
    scenario: &ScenarioSpec,
    constants: &TimeConstants,
    seed: u64,
    device: u64,
    w_diag: &Array2<f64>,
) -> Result<DeviceTrace, DatagenError> {
    let len = phys.nrows();
    if len == 0 {
        return Err(DatagenError::InvalidConfig("physical matrix is empty".into()));
    }
    clock.validate().map_err(DatagenError::InvalidConfig)?;
    constants.validate().map_err(DatagenError::InvalidConfig)?;
    scenario.validate(len)?;

    let dt = constants.dt;
    let start_epoch = start_epoch_for(scenario, constants);

    let mut rng = substream(seed, device, StreamKind::Clock);
    let normal = rand_distr::StandardNormal;

    let mut state = ClockState::initial(start_epoch);
    let mut rows = Vec::with_capacity(len);
    let stealth_everywhere = scenario.kind == ScenarioKind::StealthyDrift;

    for k in 0..len {
        let active = !scenario.is_nominal() && k >= scenario.onset;
        let true_t = start_epoch + (k as f64 + 1.0) * dt;

        let mut eff = *clock;
        if active && scenario.kind == ScenarioKind::DriftEscalation {
            eff.sigma = clock.sigma * scenario.magnitude;
        }

        let eps: f64 = normal.sample(&mut rng);
        let mut drift_next = ou_drift_step(state.drift, &eff, dt, eps);
        if active && scenario.kind == ScenarioKind::StealthyDrift {
            drift_next += scenario.magnitude;
        }
        if stealth_everywhere {
            let inc = (drift_next - state.drift).clamp(-scenario.eps_d, scenario.eps_d);
            drift_next = state.drift + inc;
        }

        let u: f64 = rng.random();
        let nu: f64 = normal.sample(&mut rng);
        let mut offset_next = offset_step(state.offset, &eff, u, nu);
        if active && scenario.kind == ScenarioKind::OffsetShock && k == scenario.onset {
            offset_next += scenario.magnitude;
        }
        if stealth_everywhere {
            // Keep the total distortion increment within the stealth cap.
            let d_drift = drift_next - state.drift;
            let total = d_drift + (offset_next - state.offset);
            if total.abs() > scenario.eps_t {
                offset_next = state.offset + total.signum() * scenario.eps_t - d_drift;
            }
        }

        let overflow_now = overflow_indicator(state.tau_prev, constants.t0) == 1;
        let next_state = ClockState {
            drift: drift_next,
            offset: offset_next,
            overflow: state.overflow || overflow_now,
            tau_prev: state.tau_prev,
        };
        let tau = compose_timestamp(true_t, &next_state, constants.t0);
        let psi = distortion(tau, true_t);
        let reported_spacing = tau - state.tau_prev;

        let d = [
            reported_spacing,
            next_state.drift,
            next_state.offset,
            f64::from(next_state.overflow),
        ];
        let x: Vec<f64> = phys.row(k).to_vec();
        let (_z, k_diag) = diagnostic_embedding(&x, &d, w_diag)?;

        rows.push(TraceRow {
            step: k,
            x,
            d,
            tau,
            psi,
            time_features: [0.0; 5],
            label: u8::from(active),
            k_diag,
        });

        state = ClockState {
            tau_prev: tau,
            ..next_state
        };
    }

    compute_time_features(&mut rows, dt);

    Ok(DeviceTrace {
        device_id: device as usize,
        scenario: *scenario,
        start_epoch,
        rows,
    })
}

/// Fill the five time-aware feature columns from the recorded clock state.
/// Rate and jitter have no predecessor at the first row and are set to 0.
pub fn compute_time_features(rows: &mut [TraceRow], dt: f64) {
    for k in 0..rows.len() {
        let psi = rows[k].psi;
        let offset = rows[k].d[2];
        let overflow = rows[k].d[3];
        let (drift_rate, jitter_ms) = if k == 0 {
            (0.0, 0.0)
        } else {
            let d_drift = rows[k].d[1] - rows[k - 1].d[1];
            let spacing = rows[k].tau - rows[k - 1].tau;
            (d_drift / dt, (spacing - dt).abs() * 1000.0)
        };
        rows[k].time_features = [psi, drift_rate, jitter_ms, offset * 1000.0, overflow];
    }
}

/// View the trace on the reported time axis: (tau, x) pairs sorted by tau.
/// Physical values are untouched; the ordering differs from step order
/// exactly when reported-time monotonicity is broken.
pub fn reindex_by_reported_time(rows: &[TraceRow]) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = rows.iter().map(|r| (r.tau, r.x.clone())).collect();
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite timestamps"));
    out
}
