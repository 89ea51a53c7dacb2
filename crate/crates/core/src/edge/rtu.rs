//! RTU-16, a toy legacy field-bus frame.
//!
//! ```text
//! byte 0     addr (1..=247)
//! byte 1     func (0x03 report, 0x06 write)
//! bytes 2-3  register, big-endian
//! bytes 4-5  value, big-endian two's complement, engineering = value / 10
//! byte 6     XOR of bytes 0-5
//! ```

use thiserror::Error;

pub const FRAME_LEN: usize = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RtuError {
    #[error("frame is {0} bytes, expected 7")]
    BadLength(usize),
    #[error("checksum mismatch: frame says {found:#04x}, computed {expected:#04x}")]
    BadChecksum { expected: u8, found: u8 },
    #[error("unknown function code {0:#04x}")]
    UnknownFunction(u8),
    #[error("address {0} outside 1..=247")]
    BadAddress(u8),
    #[error("engineering value {0} does not fit a 16-bit register")]
    ValueOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtuFunction {
    Report = 0x03,
    Write = 0x06,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtuFrame {
    pub addr: u8,
    pub func: RtuFunction,
    pub register: u16,
    pub raw: i16,
}

pub fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

impl RtuFrame {
    /// Builds a frame from an engineering value, rounding to one decimal.
    pub fn from_engineering(addr: u8, func: RtuFunction, register: u16, value: f64) -> Result<Self, RtuError> {
        if !(1..=247).contains(&addr) {
            return Err(RtuError::BadAddress(addr));
        }
        let scaled = (value * 10.0).round();
        if !scaled.is_finite() || scaled < f64::from(i16::MIN) || scaled > f64::from(i16::MAX) {
            return Err(RtuError::ValueOutOfRange(value));
        }
        Ok(RtuFrame {
            addr,
            func,
            register,
            raw: scaled as i16,
        })
    }

    pub fn engineering_value(&self) -> f64 {
        f64::from(self.raw) / 10.0
    }

    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let reg = self.register.to_be_bytes();
        let val = self.raw.to_be_bytes();
        let mut out = [self.addr, self.func as u8, reg[0], reg[1], val[0], val[1], 0];
        out[6] = checksum(&out[..6]);
        out
    }
}

pub fn translate_frame(bytes: &[u8]) -> Result<RtuFrame, RtuError> {
    if bytes.len() != FRAME_LEN {
        return Err(RtuError::BadLength(bytes.len()));
    }
    let expected = checksum(&bytes[..6]);
    if expected != bytes[6] {
        return Err(RtuError::BadChecksum {
            expected,
            found: bytes[6],
        });
    }
    let func = match bytes[1] {
        0x03 => RtuFunction::Report,
        0x06 => RtuFunction::Write,
        other => return Err(RtuError::UnknownFunction(other)),
    };
    if !(1..=247).contains(&bytes[0]) {
        return Err(RtuError::BadAddress(bytes[0]));
    }
    Ok(RtuFrame {
        addr: bytes[0],
        func,
        register: u16::from_be_bytes([bytes[2], bytes[3]]),
        raw: i16::from_be_bytes([bytes[4], bytes[5]]),
    })
}
