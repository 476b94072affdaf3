//! Simulation orchestration: sensor nodes stream packets over loopback
//! sockets or in-process channels to one inference node; the run ends when
//! every node has emitted its configured tick count.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use timeguard_core::detector::DetectorParams;
use timeguard_core::stgat::Checkpoint;

use crate::inference::{InferenceNode, SimulationReport};
use crate::node::{sensor_node_run, NodeConfig, NodeReport};
use crate::transport::{read_frame, ChannelFrameSink, TcpFrameSink};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransportMode {
    /// Deterministic channels, for CI and paired-mode comparisons.
    InProcess,
    /// Loopback TCP; port 0 binds an ephemeral port.
    Socket { port: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub mode: TransportMode,
    /// Default tick count for nodes that do not override it.
    pub duration_ticks: usize,
    pub nodes: Vec<NodeConfig>,
    pub detector: DetectorParams,
    pub checkpoint_path: PathBuf,
    /// Pace emissions in wall-clock time (latency measurement only).
    #[serde(default)]
    pub realtime: bool,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.nodes.is_empty() {
            return Err(HarnessError::Config("simulation needs at least one node".into()));
        }
        if self.duration_ticks == 0 && self.nodes.iter().any(|n| n.ticks == 0) {
            return Err(HarnessError::Config(
                "duration_ticks must be > 0 when a node does not set its own".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for node in &self.nodes {
            node.validate()?;
            if !seen.insert(node.device_id) {
                return Err(HarnessError::Config(format!(
                    "duplicate device id {}",
                    node.device_id
                )));
            }
        }
        self.detector.validate().map_err(HarnessError::Config)?;
        Ok(())
    }

    fn onsets(&self) -> BTreeMap<u16, usize> {
        self.nodes
            .iter()
            .filter(|n| !n.scenario.is_nominal())
            .map(|n| (n.device_id, n.scenario.onset))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub report: SimulationReport,
    pub nodes: Vec<NodeReport>,
}

/// Run all nodes to completion and aggregate the report.
pub fn run_simulation(
    config: &SimulationConfig,
    checkpoint: Checkpoint,
) -> Result<SimulationOutcome, HarnessError> {
    config.validate()?;
    let onsets = config.onsets();
    let mut inference = InferenceNode::new(checkpoint, config.detector);
    let stop = Arc::new(AtomicBool::new(false));

    let node_reports = match config.mode {
        TransportMode::InProcess => {
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            let mut handles = Vec::new();
            for node in config.nodes.clone() {
                let ticks = if node.ticks > 0 {
                    node.ticks
                } else {
                    config.duration_ticks
                };
                let mut sink = ChannelFrameSink(tx.clone());
                let stop = Arc::clone(&stop);
                let realtime = config.realtime;
                handles.push(std::thread::spawn(move || {
                    sensor_node_run(&node, ticks, &mut sink, &stop, realtime)
                }));
            }
            drop(tx);
            for bytes in rx {
                inference.handle_frame(&bytes);
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("sensor thread panicked"))
                .collect()
        }
        TransportMode::Socket { port } => {
            let listener = TcpListener::bind(("127.0.0.1", port))?;
            let addr = listener.local_addr()?;
            let mut handles = Vec::new();
            for node in config.nodes.clone() {
                let ticks = if node.ticks > 0 {
                    node.ticks
                } else {
                    config.duration_ticks
                };
                let stop = Arc::clone(&stop);
                let realtime = config.realtime;
                handles.push(std::thread::spawn(move || {
                    // The listener may accept after we connect; retry briefly.
                    let mut attempt = 0;
                    let stream = loop {
                        match TcpStream::connect(addr) {
                            Ok(s) => break Ok(s),
                            Err(e) if attempt < 20 => {
                                attempt += 1;
                                std::thread::sleep(std::time::Duration::from_millis(25));
                                let _ = e;
                            }
                            Err(e) => break Err(e),
                        }
                    };
                    match stream {
                        Ok(s) => {
                            let mut sink = TcpFrameSink(s);
                            sensor_node_run(&node, ticks, &mut sink, &stop, realtime)
                        }
                        Err(e) => NodeReport {
                            device_id: node.device_id,
                            packets_sent: 0,
                            error: Some(format!("connect failed: {e}")),
                        },
                    }
                }));
            }

            // One reader thread per accepted connection funnels frames into
            // a single processing loop; per-device order is preserved
            // because each device owns one ordered connection.
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            let mut readers = Vec::new();
            for _ in 0..config.nodes.len() {
                let (mut stream, _) = listener.accept()?;
                let tx = tx.clone();
                readers.push(std::thread::spawn(move || {
                    while let Ok(Some(frame)) = read_frame(&mut stream) {
                        if tx.send(frame).is_err() {
                            break;
                        }
                    }
                }));
            }
            drop(tx);
            for bytes in rx {
                inference.handle_frame(&bytes);
            }
            for reader in readers {
                let _ = reader.join();
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("sensor thread panicked"))
                .collect()
        }
    };

    Ok(SimulationOutcome {
        report: inference.into_report(&onsets),
        nodes: node_reports,
    })
}

pub fn write_report(path: &std::path::Path, outcome: &SimulationOutcome) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(outcome)?;
    std::fs::write(path, text)?;
    Ok(())
}
