//! Length-delimited frames over a reliable byte stream, plus an in-process
//! channel mode for deterministic testing.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("channel closed")]
    Closed,
    #[error("frame too large: {0} bytes")]
    Oversized(usize),
}

pub const MAX_FRAME: usize = 1 << 20;

/// Anything a sensor node can push encoded packets into.
pub trait FrameSink: Send {
    fn send_frame(&mut self, bytes: &[u8]) -> Result<(), TransportError>;
}

/// Length-prefixed frames over a TCP stream.
pub struct TcpFrameSink(pub TcpStream);

impl FrameSink for TcpFrameSink {
    fn send_frame(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        if bytes.len() > MAX_FRAME {
            return Err(TransportError::Oversized(bytes.len()));
        }
        let len = (bytes.len() as u32).to_be_bytes();
        self.0.write_all(&len)?;
        self.0.write_all(bytes)?;
        Ok(())
    }
}

/// In-process channel carrying the same encoded bytes, so both transports
/// exercise the codec identically.
pub struct ChannelFrameSink(pub mpsc::Sender<Vec<u8>>);

impl FrameSink for ChannelFrameSink {
    fn send_frame(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.0
            .send(bytes.to_vec())
            .map_err(|_| TransportError::Closed)
    }
}

/// Read one length-prefixed frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(stream: &mut TcpStream) -> Result<Option<Vec<u8>>, TransportError> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match stream.read(&mut len_buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(TransportError::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "stream ended inside a frame header",
                )))
            }
            Ok(n) => filled += n,
            Err(e) => return Err(TransportError::Io(e)),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::Oversized(len));
    }
    let mut frame = vec![0u8; len];
    stream.read_exact(&mut frame)?;
    Ok(Some(frame))
}
