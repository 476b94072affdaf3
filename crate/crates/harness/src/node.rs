//! Simulated sensor node: synthesizes telemetry, runs the clock-distortion
//! layer, and streams bit-exact packets. Distortion touches only the
//! reported timestamps; feature payloads are identical between distorted
//! and undistorted runs sharing a seed.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use timeguard_core::clockdyn::{wrap32, ClockParams, TimeConstants};
use timeguard_core::datagen::{
    build_device_trace, diagnostic_matrix, synth_physical, PhysicalConfig, ScenarioSpec,
};

use crate::transport::FrameSink;
use crate::wire::{encode_message, WireMessage};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    Synthetic { physical: PhysicalConfig },
    /// CSV of comma-separated feature values, one row per tick, cycled if
    /// shorter than the run.
    Replay { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub device_id: u16,
    pub clock: ClockParams,
    pub scenario: ScenarioSpec,
    /// Milliseconds of simulated time per tick; also the real-time pacing
    /// interval in real-time mode.
    pub emit_interval_ms: u64,
    pub feature_source: FeatureSource,
    pub seed: u64,
    /// Ticks to emit; 0 defers to the simulation duration.
    #[serde(default)]
    pub ticks: usize,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.emit_interval_ms == 0 {
            return Err(HarnessError::Config("emit_interval_ms must be > 0".into()));
        }
        self.clock
            .validate()
            .map_err(HarnessError::Config)?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.emit_interval_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub device_id: u16,
    pub packets_sent: u64,
    pub error: Option<String>,
}

fn load_replay(path: &PathBuf) -> Result<Vec<Vec<f64>>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            HarnessError::Config(format!("replay file line {}: {e}", idx + 1))
        })?);
    }
    if rows.is_empty() {
        return Err(HarnessError::Config("replay file has no rows".into()));
    }
    Ok(rows)
}

/// Emit `ticks` packets: advance the physical signal and the clock, compose
/// the reported timestamp, truncate it to the 32-bit wire representation
/// and send with an incrementing sequence number. Transport failures are
/// retried a bounded number of times, then the node shuts down cleanly with
/// the error in its report.
pub fn sensor_node_run(
    config: &NodeConfig,
    ticks: usize,
    sink: &mut dyn FrameSink,
    stop: &AtomicBool,
    realtime: bool,
) -> NodeReport {
    let mut report = NodeReport {
        device_id: config.device_id,
        packets_sent: 0,
        error: None,
    };
    if let Err(e) = config.validate() {
        report.error = Some(e.to_string());
        return report;
    }
    let constants = TimeConstants {
        dt: config.dt(),
        ..Default::default()
    };

    let phys = match &config.feature_source {
        FeatureSource::Synthetic { physical } => {
            match synth_physical(physical, ticks, config.seed, u64::from(config.device_id)) {
                Ok(m) => m,
                Err(e) => {
                    report.error = Some(e.to_string());
                    return report;
                }
            }
        }
        FeatureSource::Replay { path } => {
            let rows = match load_replay(path) {
                Ok(r) => r,
                Err(e) => {
                    report.error = Some(e.to_string());
                    return report;
                }
            };
            let f = rows[0].len();
            let mut m = ndarray::Array2::zeros((ticks, f));
            for t in 0..ticks {
                let row = &rows[t % rows.len()];
                for c in 0..f {
                    m[(t, c)] = row[c];
                }
            }
            m
        }
    };

    let w_diag = diagnostic_matrix(phys.ncols(), config.seed);
    let trace = match build_device_trace(
        &phys,
        &config.clock,
        &config.scenario,
        &constants,
        config.seed,
        u64::from(config.device_id),
        &w_diag,
    ) {
        Ok(t) => t,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };

    for (seq, row) in trace.rows.iter().enumerate() {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let whole = row.tau.floor();
        let frac_ms = (((row.tau - whole) * 1000.0).floor() as u16).min(999);
        let msg = WireMessage {
            device_id: config.device_id,
            seq: seq as u32,
            timestamp_s: wrap32(whole as i64),
            timestamp_frac_ms: frac_ms,
            features: row.x.clone(),
        };
        let bytes = match encode_message(&msg) {
            Ok(b) => b,
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        };
        let mut sent = false;
        for attempt in 0..3 {
            match sink.send_frame(&bytes) {
                Ok(()) => {
                    sent = true;
                    break;
                }
                Err(e) => {
                    if attempt == 2 {
                        report.error = Some(format!("transport failed after retries: {e}"));
                    } else {
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    }
                }
            }
        }
        if !sent {
            return report;
        }
        report.packets_sent += 1;
        if realtime {
            std::thread::sleep(std::time::Duration::from_millis(config.emit_interval_ms));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::decode_message;
    use std::sync::atomic::AtomicBool;
    use std::sync::mpsc;
    use timeguard_core::datagen::ScenarioKind;

    fn base_config(device: u16) -> NodeConfig {
        NodeConfig {
            device_id: device,
            clock: ClockParams::default(),
            scenario: ScenarioSpec::nominal(),
            emit_interval_ms: 1000,
            feature_source: FeatureSource::Synthetic {
                physical: PhysicalConfig::default(),
            },
            seed: 5,
            ticks: 0,
        }
    }

    fn run_collect(config: &NodeConfig, ticks: usize) -> (NodeReport, Vec<WireMessage>) {
        let (tx, rx) = mpsc::channel();
        let mut sink = crate::transport::ChannelFrameSink(tx);
        let stop = AtomicBool::new(false);
        let report = sensor_node_run(config, ticks, &mut sink, &stop, false);
        drop(sink);
        let msgs: Vec<WireMessage> = rx.iter().map(|b| decode_message(&b).unwrap()).collect();
        (report, msgs)
    }

    #[test]
    fn nominal_node_emits_monotone_timestamps() {
        let (report, msgs) = run_collect(&base_config(1), 100);
        assert_eq!(report.packets_sent, 100);
        assert!(report.error.is_none());
        assert_eq!(msgs.len(), 100);
        for (k, msg) in msgs.iter().enumerate() {
            assert_eq!(msg.seq, k as u32);
            assert_eq!(msg.features.len(), 5);
        }
        for pair in msgs.windows(2) {
            let t0 = f64::from(pair[0].timestamp_s) + f64::from(pair[0].timestamp_frac_ms) / 1000.0;
            let t1 = f64::from(pair[1].timestamp_s) + f64::from(pair[1].timestamp_frac_ms) / 1000.0;
            let spacing = t1 - t0;
            assert!((spacing - 1.0).abs() < 0.2, "spacing {spacing}");
        }
    }

    #[test]
    fn rollover_node_emits_a_negative_timestamp() {
        let mut config = base_config(2);
        config.scenario = ScenarioSpec {
            kind: ScenarioKind::EpochOverflow,
            onset: 50,
            magnitude: 0.0,
            eps_t: 0.001,
            eps_d: 0.001,
        };
        let (report, msgs) = run_collect(&config, 120);
        assert_eq!(report.packets_sent, 120);
        let first_negative = msgs.iter().position(|m| m.timestamp_s < 0);
        let idx = first_negative.expect("wrap must produce a negative wire timestamp");
        assert!(idx.abs_diff(50) <= 1, "negative at {idx}");
    }

    #[test]
    fn payloads_identical_between_distorted_and_clean_runs() {
        let clean = base_config(3);
        let mut distorted = base_config(3);
        distorted.scenario = ScenarioSpec {
            kind: ScenarioKind::OffsetShock,
            onset: 10,
            magnitude: 5.0,
            eps_t: 0.001,
            eps_d: 0.001,
        };
        let (_, clean_msgs) = run_collect(&clean, 50);
        let (_, distorted_msgs) = run_collect(&distorted, 50);
        let mut timestamps_differ = false;
        for (a, b) in clean_msgs.iter().zip(&distorted_msgs) {
            assert_eq!(a.features, b.features, "sensor payloads must match bit-for-bit");
            if (a.timestamp_s, a.timestamp_frac_ms) != (b.timestamp_s, b.timestamp_frac_ms) {
                timestamps_differ = true;
            }
        }
        assert!(timestamps_differ, "distortion must show up in the timestamps");
    }

    #[test]
    fn stop_signal_ends_the_run_early() {
        let (tx, rx) = mpsc::channel();
        let mut sink = crate::transport::ChannelFrameSink(tx);
        let stop = AtomicBool::new(true);
        let report = sensor_node_run(&base_config(4), 100, &mut sink, &stop, false);
        drop(sink);
        assert_eq!(report.packets_sent, 0);
        assert_eq!(rx.iter().count(), 0);
    }

    #[test]
    fn dropped_transport_reports_error_without_panic() {
        let (tx, rx) = mpsc::channel();
        drop(rx);
        let mut sink = crate::transport::ChannelFrameSink(tx);
        let stop = AtomicBool::new(false);
        let report = sensor_node_run(&base_config(5), 10, &mut sink, &stop, false);
        assert_eq!(report.packets_sent, 0);
        assert!(report.error.is_some());
    }

    #[test]
    fn replay_source_cycles_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,4.0\n").unwrap();
        let mut config = base_config(6);
        config.feature_source = FeatureSource::Replay { path };
        let (report, msgs) = run_collect(&config, 5);
        assert_eq!(report.packets_sent, 5);
        assert_eq!(msgs[0].features, vec![1.0, 2.0]);
        assert_eq!(msgs[1].features, vec![3.0, 4.0]);
        assert_eq!(msgs[4].features, vec![1.0, 2.0]);
    }
}
