//! Relay wire format: 1 type byte, 4-byte big-endian payload length, payload.

use std::io;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use tokio_util::codec::{Decoder, Encoder};

pub const HEADER_LEN: usize = 5;
pub const MAX_DATA_PAYLOAD: usize = 1 << 20;
pub const MAX_ERROR_PAYLOAD: usize = 4096;
pub const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Open = 1,
    Claim = 2,
    Accept = 3,
    Data = 4,
    Done = 5,
    Error = 6,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Open,
            2 => Self::Claim,
            3 => Self::Accept,
            4 => Self::Data,
            5 => Self::Done,
            6 => Self::Error,
            _ => return None,
        })
    }

    /// Allowed payload lengths, inclusive.
    fn payload_bounds(self) -> (usize, usize) {
        match self {
            Self::Open | Self::Claim | Self::Done => (DIGEST_LEN, DIGEST_LEN),
            Self::Accept => (0, 16),
            Self::Data => (1, MAX_DATA_PAYLOAD),
            Self::Error => (0, MAX_ERROR_PAYLOAD),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("{kind:?} frame with {len}-byte payload is outside the allowed {min}..={max}")]
    BadLength {
        kind: FrameType,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error("{0} trailing bytes after the last frame")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(kind: FrameType, payload: impl Into<Bytes>) -> Self {
        Self {
            kind,
            payload: payload.into(),
        }
    }

    pub fn error(msg: &str) -> Self {
        let mut bytes = msg.as_bytes();
        if bytes.len() > MAX_ERROR_PAYLOAD {
            bytes = &bytes[..MAX_ERROR_PAYLOAD];
        }
        Self::new(FrameType::Error, Bytes::copy_from_slice(bytes))
    }

    pub fn error_message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    fn check(kind: FrameType, len: usize) -> Result<(), FrameError> {
        let (min, max) = kind.payload_bounds();
        if len < min || len > max {
            return Err(FrameError::BadLength { kind, len, min, max });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FrameCodec;

impl Decoder for FrameCodec {
    type Item = Frame;
    type Error = FrameError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, FrameError> {
        if src.len() < HEADER_LEN {
            return Ok(None);
        }
        let kind = FrameType::from_byte(src[0]).ok_or(FrameError::UnknownType(src[0]))?;
        let len = u32::from_be_bytes([src[1], src[2], src[3], src[4]]) as usize;
        Frame::check(kind, len)?;
        if src.len() < HEADER_LEN + len {
            src.reserve(HEADER_LEN + len - src.len());
            return Ok(None);
        }
        src.advance(HEADER_LEN);
        let payload = src.split_to(len).freeze();
        Ok(Some(Frame { kind, payload }))
    }
}

impl Encoder<Frame> for FrameCodec {
    type Error = FrameError;

    fn encode(&mut self, frame: Frame, dst: &mut BytesMut) -> Result<(), FrameError> {
        Frame::check(frame.kind, frame.payload.len())?;
        dst.reserve(HEADER_LEN + frame.payload.len());
        dst.put_u8(frame.kind as u8);
        dst.put_u32(frame.payload.len() as u32);
        dst.put_slice(&frame.payload);
        Ok(())
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let mut buf = BytesMut::new();
    FrameCodec.encode(frame.clone(), &mut buf)?;
    Ok(buf.to_vec())
}

/// Parses a complete captured byte stream into frames.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let mut buf = BytesMut::from(bytes);
    let mut out = Vec::new();
    while let Some(frame) = FrameCodec.decode(&mut buf)? {
        out.push(frame);
    }
    if !buf.is_empty() {
        return Err(FrameError::Trailing(buf.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wire_layout() {
        let bytes = encode_frame(&Frame::error("no")).unwrap();
        assert_eq!(bytes, [6, 0, 0, 0, 2, b'n', b'o']);
        let open = encode_frame(&Frame::new(FrameType::Open, vec![7u8; 32])).unwrap();
        assert_eq!(&open[..5], &[1, 0, 0, 0, 32]);
    }

    #[test]
    fn partial_input_waits() {
        let bytes = encode_frame(&Frame::new(FrameType::Data, vec![1u8; 10])).unwrap();
        let mut buf = BytesMut::from(&bytes[..7]);
        assert!(FrameCodec.decode(&mut buf).unwrap().is_none());
        buf.extend_from_slice(&bytes[7..]);
        assert_eq!(FrameCodec.decode(&mut buf).unwrap().unwrap().payload.len(), 10);
    }

    #[test]
    fn rejects_bad_frames() {
        let mut header = vec![4u8];
        header.extend_from_slice(&((MAX_DATA_PAYLOAD as u32) + 1).to_be_bytes());
        assert!(matches!(
            FrameCodec.decode(&mut BytesMut::from(&header[..])),
            Err(FrameError::BadLength {
                kind: FrameType::Data,
                ..
            })
        ));
        assert!(matches!(
            FrameCodec.decode(&mut BytesMut::from(&[9u8, 0, 0, 0, 0][..])),
            Err(FrameError::UnknownType(9))
        ));
        assert!(matches!(
            FrameCodec.decode(&mut BytesMut::from(&[1u8, 0, 0, 0, 3, 1, 2, 3][..])),
            Err(FrameError::BadLength {
                kind: FrameType::Open,
                ..
            })
        ));
        assert!(encode_frame(&Frame::new(FrameType::Data, vec![0u8; MAX_DATA_PAYLOAD + 1])).is_err());
        assert!(matches!(decode_all(&[6, 0, 0]), Err(FrameError::Trailing(3))));
    }

    proptest! {
        #[test]
        fn codec_round_trip(frames in proptest::collection::vec((1u8..=6, proptest::collection::vec(any::<u8>(), 0..200)), 0..8)) {
            let frames: Vec<Frame> = frames
                .into_iter()
                .map(|(k, mut p)| {
                    let kind = FrameType::from_byte(k).unwrap();
                    match kind {
                        FrameType::Open | FrameType::Claim | FrameType::Done => p.resize(DIGEST_LEN, 0),
                        FrameType::Accept => p.truncate(16),
                        FrameType::Data if p.is_empty() => p.push(0),
                        _ => {}
                    }
                    Frame::new(kind, p)
                })
                .collect();
            let mut wire = Vec::new();
            for f in &frames {
                wire.extend(encode_frame(f).unwrap());
            }
            prop_assert_eq!(decode_all(&wire).unwrap(), frames);
        }
    }
}
