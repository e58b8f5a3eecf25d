//! Byte framing for the master/station bus.
//!
//! ```text
//! AA | addr | cmd | len | payload (len bytes, <= 200) | crc16 LE
//! ```
//!
//! The CRC (CRC-16/CCITT-FALSE) covers `addr..payload`. Valid addresses are
//! 0..=29 and the broadcast address 0xFF. There is no byte stuffing: a stream
//! decoder that loses sync drops the offending start byte and searches for
//! the next 0xAA.

use thiserror::Error;

use crate::crc::crc16;

pub const SOF: u8 = 0xAA;
pub const BROADCAST: u8 = 0xFF;
pub const MAX_STATION_ADDR: u8 = 29;
pub const MAX_PAYLOAD: usize = 200;
/// SOF + addr + cmd + len + crc.
pub const FRAME_OVERHEAD: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame crc mismatch: stored 0x{stored:04X}, computed 0x{computed:04X}")]
    CrcMismatch { stored: u16, computed: u16 },
    #[error("invalid station address 0x{0:02X}")]
    BadAddress(u8),
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLong(usize),
    #[error("no start-of-frame byte in input")]
    NoFrame,
}

pub fn valid_addr(addr: u8) -> bool {
    addr <= MAX_STATION_ADDR || addr == BROADCAST
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub addr: u8,
    pub cmd: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(addr: u8, cmd: u8, payload: Vec<u8>) -> Result<Self, FrameError> {
        if !valid_addr(addr) {
            return Err(FrameError::BadAddress(addr));
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        Ok(Frame { addr, cmd, payload })
    }

    pub fn is_broadcast(&self) -> bool {
        self.addr == BROADCAST
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(SOF);
        out.push(self.addr);
        out.push(self.cmd);
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        let crc = crc16(&out[1..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

pub fn frame_encode(addr: u8, cmd: u8, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    Ok(Frame::new(addr, cmd, payload.to_vec())?.encode())
}

/// Parses the frame starting at `bytes[0]`, which must be [`SOF`].
fn parse_at(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    debug_assert_eq!(bytes.first(), Some(&SOF));
    if bytes.len() < 4 {
        return Err(FrameError::Truncated { needed: FRAME_OVERHEAD, have: bytes.len() });
    }
    let len = bytes[3] as usize;
    let total = FRAME_OVERHEAD + len;
    if len > MAX_PAYLOAD {
        // Longer than any legal frame; callers resync past it.
        return Err(FrameError::PayloadTooLong(len));
    }
    if bytes.len() < total {
        return Err(FrameError::Truncated { needed: total, have: bytes.len() });
    }
    let stored = u16::from_le_bytes([bytes[total - 2], bytes[total - 1]]);
    let computed = crc16(&bytes[1..total - 2]);
    if stored != computed {
        return Err(FrameError::CrcMismatch { stored, computed });
    }
    let addr = bytes[1];
    if !valid_addr(addr) {
        return Err(FrameError::BadAddress(addr));
    }
    Ok((Frame { addr, cmd: bytes[2], payload: bytes[4..total - 2].to_vec() }, total))
}

/// Decodes the first frame in `bytes`, skipping any garbage before the first
/// start byte. Returns the frame and the number of input bytes consumed.
pub fn frame_decode(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let start = bytes.iter().position(|&b| b == SOF).ok_or(FrameError::NoFrame)?;
    let (frame, used) = parse_at(&bytes[start..])?;
    Ok((frame, start + used))
}

/// Incremental decoder for a byte stream that may contain noise.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    discarded: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes dropped while resynchronizing.
    pub fn discarded(&self) -> usize {
        self.discarded
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn drop_front(&mut self, n: usize) {
        self.buf.drain(..n);
        self.discarded += n;
    }

    /// Returns the next complete valid frame, or `None` when more input is
    /// needed. Invalid candidates are skipped one start byte at a time.
    pub fn next_frame(&mut self) -> Option<Frame> {
        loop {
            match self.buf.iter().position(|&b| b == SOF) {
                Some(0) => {}
                Some(n) => self.drop_front(n),
                None => {
                    let n = self.buf.len();
                    self.drop_front(n);
                    return None;
                }
            }
            match parse_at(&self.buf) {
                Ok((frame, used)) => {
                    self.buf.drain(..used);
                    return Some(frame);
                }
                Err(FrameError::Truncated { .. }) => return None,
                Err(_) => self.drop_front(1),
            }
        }
    }

    /// End of input: treat a pending partial frame as noise and keep
    /// scanning the remainder.
    pub fn finish(&mut self) -> Vec<Frame> {
        let mut frames = Vec::new();
        while !self.buf.is_empty() {
            match self.next_frame() {
                Some(f) => frames.push(f),
                None if !self.buf.is_empty() => self.drop_front(1),
                None => break,
            }
        }
        frames
    }
}
