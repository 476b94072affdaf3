//! Software testbed: clock-distorted sensor nodes streaming bit-exact
//! telemetry packets over loopback TCP or in-process channels to an online
//! inference node running the trained detector.

pub mod inference;
pub mod node;
pub mod sim;
pub mod transport;
pub mod wire;

pub use inference::{DeviceReport, InferenceNode, SimulationReport};
pub use node::{sensor_node_run, FeatureSource, NodeConfig, NodeReport};
pub use sim::{run_simulation, write_report, SimulationConfig, SimulationOutcome, TransportMode};
pub use wire::{crc32, decode_message, encode_message, WireError, WireMessage};

/// Small constructors for integration tests and diagnostics.
pub mod sim_test_support {
    use crate::transport::ChannelFrameSink;
    use std::sync::mpsc;

    pub fn channel_sink(tx: mpsc::Sender<Vec<u8>>) -> ChannelFrameSink {
        ChannelFrameSink(tx)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] timeguard_core::stgat::StgatError),
    #[error(transparent)]
    Datagen(#[from] timeguard_core::datagen::DatagenError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}
