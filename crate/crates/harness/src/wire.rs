//! Bit-exact telemetry packet: big-endian fields, a 32-bit signed Unix
//! timestamp (the rollover-vulnerable representation) and a trailing CRC-32
//! over all preceding bytes.
//!
//! Layout: magic `0x54 0x47`, version `0x01`, device_id u16, seq u32,
//! timestamp_s i32, timestamp_frac_ms u16 (0..=999), feature_count u8,
//! feature_count IEEE-754 f64 values, crc32 u32. Total length is
//! `16 + 8 * feature_count + 4` bytes.

pub const MAGIC: [u8; 2] = [0x54, 0x47];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 16;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("bad length: expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("crc mismatch: computed {computed:#010x}, stored {stored:#010x}")]
    BadCrc { computed: u32, stored: u32 },
    #[error("fractional milliseconds out of range: {0}")]
    BadFracMs(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub device_id: u16,
    pub seq: u32,
    /// Seconds as a 32-bit signed Unix value; wraps negative past 2^31 - 1.
    pub timestamp_s: i32,
    pub timestamp_frac_ms: u16,
    pub features: Vec<f64>,
}

/// CRC-32 (IEEE, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn wire_len(feature_count: usize) -> usize {
    HEADER_LEN + 8 * feature_count + CRC_LEN
}

pub fn encode_message(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    if msg.timestamp_frac_ms > 999 {
        return Err(WireError::BadFracMs(msg.timestamp_frac_ms));
    }
    let mut out = Vec::with_capacity(wire_len(msg.features.len()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&msg.device_id.to_be_bytes());
    out.extend_from_slice(&msg.seq.to_be_bytes());
    out.extend_from_slice(&msg.timestamp_s.to_be_bytes());
    out.extend_from_slice(&msg.timestamp_frac_ms.to_be_bytes());
    out.push(msg.features.len() as u8);
    for f in &msg.features {
        out.extend_from_slice(&f.to_be_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, WireError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(WireError::BadLength {
            expected: HEADER_LEN + CRC_LEN,
            got: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1]];
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(WireError::BadVersion(bytes[2]));
    }
    let feature_count = bytes[15] as usize;
    let expected = wire_len(feature_count);
    if bytes.len() != expected {
        return Err(WireError::BadLength {
            expected,
            got: bytes.len(),
        });
    }
    let stored = u32::from_be_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32(&bytes[..expected - 4]);
    if stored != computed {
        return Err(WireError::BadCrc { computed, stored });
    }
    let frac = u16::from_be_bytes(bytes[13..15].try_into().unwrap());
    if frac > 999 {
        return Err(WireError::BadFracMs(frac));
    }
    let mut features = Vec::with_capacity(feature_count);
    for i in 0..feature_count {
        let start = HEADER_LEN + 8 * i;
        features.push(f64::from_be_bytes(bytes[start..start + 8].try_into().unwrap()));
    }
    Ok(WireMessage {
        device_id: u16::from_be_bytes(bytes[3..5].try_into().unwrap()),
        seq: u32::from_be_bytes(bytes[5..9].try_into().unwrap()),
        timestamp_s: i32::from_be_bytes(bytes[9..13].try_into().unwrap()),
        timestamp_frac_ms: frac,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seq: u32) -> WireMessage {
        WireMessage {
            device_id: 7,
            seq,
            timestamp_s: 1_700_000_000,
            timestamp_frac_ms: 250,
            features: vec![220.5, 0.23, 25.1, 48.0, 51.2],
        }
    }

    #[test]
    fn round_trip_field_for_field() {
        for seq in [0u32, 1, 999, u32::MAX] {
            let msg = sample(seq);
            let bytes = encode_message(&msg).unwrap();
            assert_eq!(bytes.len(), wire_len(5));
            let back = decode_message(&bytes).unwrap();
            assert_eq!(msg, back);
        }
    }

    #[test]
    fn max_positive_timestamp_encodes_as_expected_bytes() {
        let mut msg = sample(1);
        msg.timestamp_s = 2_147_483_647;
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(&bytes[9..13], &[0x7F, 0xFF, 0xFF, 0xFF]);
        // And the wrapped value one second later is the negative boundary.
        msg.timestamp_s = i32::MIN;
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(&bytes[9..13], &[0x80, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn each_fault_yields_its_own_error() {
        let good = encode_message(&sample(3)).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = 0x55;
        // Magic is checked before the CRC so the error is specific.
        assert!(matches!(
            decode_message(&bad_magic),
            Err(WireError::BadMagic(_))
        ));

        let mut bad_version = good.clone();
        bad_version[2] = 0x02;
        assert!(matches!(
            decode_message(&bad_version),
            Err(WireError::BadVersion(0x02))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            decode_message(truncated),
            Err(WireError::BadLength { .. })
        ));

        let mut flipped = good.clone();
        flipped[20] ^= 0x01;
        assert!(matches!(decode_message(&flipped), Err(WireError::BadCrc { .. })));

        let msg = WireMessage {
            timestamp_frac_ms: 1000,
            ..sample(0)
        };
        assert!(matches!(
            encode_message(&msg),
            Err(WireError::BadFracMs(1000))
        ));
    }

    #[test]
    fn every_payload_byte_is_crc_protected() {
        let good = encode_message(&sample(9)).unwrap();
        for i in 0..good.len() - CRC_LEN {
            let mut corrupted = good.clone();
            corrupted[i] ^= 0x40;
            assert!(
                decode_message(&corrupted).is_err(),
                "flip at byte {i} went undetected"
            );
        }
    }

    #[test]
    fn crc_reference_vector() {
        // Standard check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }
}
