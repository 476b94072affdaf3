//! Online inference node: decodes telemetry packets, reconstructs the
//! drift inputs from received timestamps with wrap-aware unwrapping,
//! maintains a per-device sliding window, and drives the model plus the
//! sequential detector one packet at a time.
//!
//! Each device runs its own pipeline; decisions depend only on that
//! device's packets in sequence order, so socket and in-process transports
//! produce identical detections.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use timeguard_core::clockdyn::T0;
use timeguard_core::datagen::TraceRow;
use timeguard_core::detector::{Detection, DetectorParams, DetectorState, StepInput};
use timeguard_core::stgat::{score_window_tail, Checkpoint};

use crate::wire::decode_message;

/// One epoch of the 32-bit counter in seconds.
const WRAP_SPAN: f64 = 4_294_967_296.0;
/// Backward jumps beyond half the span count as a wrap.
const WRAP_THRESHOLD: f64 = 2_147_483_648.0;
/// Distortion increments beyond this are treated as synchronization offset
/// jumps when splitting the estimated distortion into drift and offset.
const OFFSET_JUMP_S: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: u16,
    pub packets: u64,
    pub out_of_order: u64,
    pub detections: Vec<Detection>,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub devices: Vec<DeviceReport>,
    pub total_packets: u64,
    pub decode_errors: u64,
    /// Steps from each configured scenario onset to the first detection at
    /// or after it; `None` marks a miss.
    pub detection_delays: Vec<(u16, Option<u64>)>,
}

struct DeviceState {
    packets: u64,
    out_of_order: u64,
    next_seq: u32,
    epoch: f64,
    raw_prev: Option<f64>,
    unwrapped_prev: f64,
    start_estimate: Option<f64>,
    psi_prev: f64,
    drift_prev: f64,
    offset_estimate: f64,
    overflow_latched: bool,
    window: VecDeque<TraceRow>,
    detector: DetectorState,
    detections: Vec<Detection>,
    latencies_ms: Vec<f64>,
    scores: Vec<(usize, f64, f64)>,
}

impl DeviceState {
    fn new(detector: DetectorParams) -> Self {
        Self {
            packets: 0,
            out_of_order: 0,
            next_seq: 0,
            epoch: 0.0,
            raw_prev: None,
            unwrapped_prev: 0.0,
            start_estimate: None,
            psi_prev: 0.0,
            drift_prev: 0.0,
            offset_estimate: 0.0,
            overflow_latched: false,
            window: VecDeque::new(),
            detector: DetectorState::new(detector),
            detections: Vec::new(),
            latencies_ms: Vec::new(),
            scores: Vec::new(),
        }
    }
}

/// The inference pipeline, fed one decoded frame at a time.
pub struct InferenceNode {
    checkpoint: Checkpoint,
    detector: DetectorParams,
    devices: BTreeMap<u16, DeviceState>,
    decode_errors: u64,
}

impl InferenceNode {
    pub fn new(checkpoint: Checkpoint, detector: DetectorParams) -> Self {
        Self {
            checkpoint,
            detector,
            devices: BTreeMap::new(),
            decode_errors: 0,
        }
    }

    pub fn decode_errors(&self) -> u64 {
        self.decode_errors
    }

    /// Per-step (seq, posterior, drift estimate) for one device, in order.
    pub fn device_scores(&self, device: u16) -> Vec<(usize, f64, f64)> {
        self.devices
            .get(&device)
            .map(|s| s.scores.clone())
            .unwrap_or_default()
    }

    /// Reconstructed rows currently buffered for one device (most recent
    /// window).
    pub fn device_window(&self, device: u16) -> Vec<TraceRow> {
        self.devices
            .get(&device)
            .map(|s| s.window.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Decode and process one frame. Decode failures are counted and the
    /// stream continues; a packet is never both counted and an error.
    pub fn handle_frame(&mut self, bytes: &[u8]) {
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(_) => {
                self.decode_errors += 1;
                return;
            }
        };
        let detector = self.detector;
        let state = self
            .devices
            .entry(msg.device_id)
            .or_insert_with(|| DeviceState::new(detector));
        // Per-device packets are processed in sequence order; the transport
        // delivers them in order per connection, so anything else is counted
        // and skipped.
        if msg.seq != state.next_seq {
            state.out_of_order += 1;
            if msg.seq < state.next_seq {
                return;
            }
        }
        state.next_seq = msg.seq + 1;
        state.packets += 1;

        let dt = self.checkpoint.dt;
        let raw_tau = f64::from(msg.timestamp_s) + f64::from(msg.timestamp_frac_ms) / 1000.0;
        if let Some(prev) = state.raw_prev {
            if raw_tau < prev - WRAP_THRESHOLD {
                state.epoch += 1.0;
            }
        }
        let unwrapped = raw_tau + state.epoch * WRAP_SPAN;
        state.raw_prev = Some(raw_tau);

        let seq = f64::from(msg.seq);
        let start = *state
            .start_estimate
            .get_or_insert(unwrapped - (seq + 1.0) * dt);
        let true_estimate = start + (seq + 1.0) * dt;
        let psi = unwrapped - true_estimate;

        // Split the estimated distortion into its components. The rollover
        // latch imprints a single distortion jump of +T0, which is how it is
        // observable here; smaller jumps beyond the threshold are
        // synchronization offsets, the remainder is drift.
        let first = state.packets == 1;
        let d_psi = if first { 0.0 } else { psi - state.psi_prev };
        let t0 = T0 as f64;
        let flip = !state.overflow_latched && d_psi > 0.5 * t0;
        if flip {
            state.overflow_latched = true;
        }
        let excess = d_psi - if flip { t0 } else { 0.0 };
        if !first && excess.abs() > OFFSET_JUMP_S {
            state.offset_estimate += excess;
        }
        let overflow_component = if state.overflow_latched { t0 } else { 0.0 };
        let drift_estimate = psi - state.offset_estimate - overflow_component;

        let spacing = if first {
            dt
        } else {
            unwrapped - state.unwrapped_prev
        };
        let drift_rate = if first {
            0.0
        } else {
            (drift_estimate - state.drift_prev) / dt
        };
        let row = TraceRow {
            step: msg.seq as usize,
            x: msg.features.clone(),
            d: [
                spacing,
                drift_estimate,
                state.offset_estimate,
                f64::from(state.overflow_latched),
            ],
            tau: unwrapped,
            psi,
            time_features: [
                psi,
                drift_rate,
                (spacing - dt).abs() * 1000.0,
                state.offset_estimate * 1000.0,
                f64::from(state.overflow_latched),
            ],
            label: 0,
            k_diag: 0.0,
        };
        state.psi_prev = psi;
        state.drift_prev = drift_estimate;
        state.unwrapped_prev = unwrapped;

        state.window.push_back(row);
        while state.window.len() > self.checkpoint.window {
            state.window.pop_front();
        }
        // The detector idles until the window has filled.
        if state.window.len() < self.checkpoint.window {
            return;
        }

        let started = Instant::now();
        let rows: Vec<TraceRow> = state.window.iter().cloned().collect();
        let (p_hat, delta_hat) = match score_window_tail(
            &rows,
            &self.checkpoint.normalization,
            &self.checkpoint.params,
            &self.checkpoint.hyper,
        ) {
            Ok(res) => res,
            Err(_) => return,
        };
        let decision = state.detector.decide_step(
            StepInput {
                p_hat,
                delta_hat,
                tau: raw_tau,
                tau_unwrapped: Some(unwrapped),
            },
            &[
                self.checkpoint.params.w_over[0],
                self.checkpoint.params.w_over[1],
                self.checkpoint.params.w_over[2],
                self.checkpoint.params.w_over[3],
            ],
        );
        state.latencies_ms.push(started.elapsed().as_secs_f64() * 1000.0);
        state.scores.push((msg.seq as usize, p_hat, delta_hat));
        if decision.fired {
            // Record stream positions: the sequence number is the step.
            state.detections.push(Detection {
                step: msg.seq as usize,
                ..decision
            });
        }
    }

    /// Consume the node and aggregate the report. `onsets` maps device ids
    /// to their injected scenario onset, if any.
    pub fn into_report(self, onsets: &BTreeMap<u16, usize>) -> SimulationReport {
        let mut devices = Vec::new();
        let mut total = 0u64;
        let mut delays = Vec::new();
        for (device, state) in self.devices {
            total += state.packets;
            let (mean, p95) = latency_stats(&state.latencies_ms);
            if let Some(&onset) = onsets.get(&device) {
                let first = state
                    .detections
                    .iter()
                    .find(|d| d.step >= onset)
                    .map(|d| (d.step - onset) as u64);
                delays.push((device, first));
            }
            devices.push(DeviceReport {
                device,
                packets: state.packets,
                out_of_order: state.out_of_order,
                detections: state.detections,
                latency_mean_ms: mean,
                latency_p95_ms: p95,
            });
        }
        SimulationReport {
            devices,
            total_packets: total,
            decode_errors: self.decode_errors,
            detection_delays: delays,
        }
    }
}

fn latency_stats(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as f64) * 0.95).ceil() as usize;
    let p95 = sorted[idx.clamp(1, sorted.len()) - 1];
    (mean, p95)
}
