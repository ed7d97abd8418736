//! Bit-exact framing of the reconciliation messages.
//!
//! Every frame is `u32 length (LE) | u8 tag | body`, where `length` counts
//! the tag and the body. Integer fields in bodies are little-endian; bit
//! fields are packed MSB-first and zero-padded to a byte boundary.

use crate::bits::{BitReader, BitVec, BitWriter};
use crate::error::{Error, Result};
use crate::feedback::CompressedFeedback;

pub const TAG_DEL_COUNT: u8 = 0x01;
pub const TAG_CHECK_BITS: u8 = 0x02;
pub const TAG_FEEDBACK: u8 = 0x03;
pub const TAG_PACKAGES: u8 = 0x04;
pub const TAG_CHECKSUM: u8 = 0x05;
pub const TAG_ABORT: u8 = 0x06;
pub const TAG_COLUMN_REQUEST: u8 = 0x07;

/// Feedback body: direct index list or compressed mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeedbackBody {
    Direct(Vec<usize>),
    Compressed(CompressedFeedback),
}

/// `u8 scheme | u32 N | u16 d | u64 permutation_seed | u16 count |
/// count × n-bit indices | payload bits`, padded to a byte.
///
/// For the direct scheme the indices are the potential deletions and there
/// is no payload; for the compressed scheme they are the mismatch set `𝒯`
/// followed by `U^{S^c}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackFrame {
    pub n: usize,
    pub d: usize,
    pub permutation_seed: u64,
    pub body: FeedbackBody,
}

impl FeedbackFrame {
    fn index_bits(&self) -> u32 {
        self.n.trailing_zeros()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (scheme, indices, payload): (u8, &[usize], Option<&BitVec>) = match &self.body {
            FeedbackBody::Direct(idx) => (0, idx, None),
            FeedbackBody::Compressed(c) => (1, &c.mismatch, Some(&c.payload)),
        };
        if indices.len() > u16::MAX as usize {
            return Err(Error::Domain(format!("{} indices overflow the u16 count", indices.len())));
        }
        let mut out = vec![scheme];
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u16).to_le_bytes());
        out.extend_from_slice(&self.permutation_seed.to_le_bytes());
        out.extend_from_slice(&(indices.len() as u16).to_le_bytes());
        let nb = self.index_bits();
        let mut w = BitWriter::new();
        for &i in indices {
            if i >= self.n {
                return Err(Error::Domain(format!("index {} outside [0, {})", i, self.n)));
            }
            w.push_uint(i as u64, nb);
        }
        if let Some(p) = payload {
            for b in p.iter() {
                w.push_bit(b);
            }
        }
        out.extend(w.finish());
        Ok(out)
    }

    /// `payload_bits(n, d)` gives `|S^c|` for compressed frames.
    pub fn decode(bytes: &[u8], payload_bits: impl Fn(usize, usize) -> Option<usize>) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let scheme = c.u8()?;
        let n = c.u32()? as usize;
        let d = c.u16()? as usize;
        let permutation_seed = c.u64()?;
        let count = c.u16()? as usize;
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Format(format!("feedback blocklength {} is not a power of two", n)));
        }
        let nb = n.trailing_zeros();
        let rest = c.rest();
        let payload_len = match scheme {
            0 => 0,
            1 => payload_bits(n, d).ok_or_else(|| Error::Format(format!("no source code for N={} d={}", n, d)))?,
            other => return Err(Error::Format(format!("unknown feedback scheme {}", other))),
        };
        let total = count * nb as usize + payload_len;
        if rest.len() != total.div_ceil(8) {
            return Err(Error::Format(format!(
                "feedback body of {} bytes, expected {}",
                rest.len(),
                total.div_ceil(8)
            )));
        }
        let mut r = BitReader::new(rest);
        let indices = (0..count).map(|_| r.read_uint(nb).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let body = if scheme == 0 {
            FeedbackBody::Direct(indices)
        } else {
            let payload = (0..payload_len).map(|_| r.read_bit()).collect::<Result<Vec<_>>>()?;
            FeedbackBody::Compressed(CompressedFeedback { payload: BitVec::from_bits(payload)?, mismatch: indices })
        };
        Ok(FeedbackFrame { n, d, permutation_seed, body })
    }
}

/// A package on the wire: order key plus `L` payload bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WirePackage {
    pub order_key: u64,
    pub payload: BitVec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ColumnMode {
    /// Check bits of the deletion code.
    CheckBits = 0,
    /// The raw column, sent as `K = N` bits.
    Raw = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    InconsistentStore = 1,
    DecodeFailure = 2,
    Protocol = 3,
}

impl AbortReason {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(AbortReason::InconsistentStore),
            2 => Ok(AbortReason::DecodeFailure),
            3 => Ok(AbortReason::Protocol),
            _ => Err(Error::Format(format!("unknown abort reason {}", v))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    DelCount {
        d: u32,
    },
    CheckBits {
        column: u16,
        k: u32,
        digest: u64,
        bits: BitVec,
    },
    Feedback(FeedbackFrame),
    Packages(Vec<WirePackage>),
    /// XOR of the candidate payloads; `order_key` is the XOR of their keys.
    Checksum(WirePackage),
    Abort(AbortReason),
    ColumnRequest {
        column: u16,
        mode: ColumnMode,
    },
}

/// What a receiver must know to parse bodies that are not self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireContext {
    /// Package length `L` in bits.
    pub package_bits: usize,
    /// `|S^c|` of the session's source code, if any.
    pub feedback_payload_bits: Option<usize>,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::DelCount { .. } => TAG_DEL_COUNT,
            Message::CheckBits { .. } => TAG_CHECK_BITS,
            Message::Feedback(_) => TAG_FEEDBACK,
            Message::Packages(_) => TAG_PACKAGES,
            Message::Checksum(_) => TAG_CHECKSUM,
            Message::Abort(_) => TAG_ABORT,
            Message::ColumnRequest { .. } => TAG_COLUMN_REQUEST,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = vec![self.tag()];
        match self {
            Message::DelCount { d } => body.extend_from_slice(&d.to_le_bytes()),
            Message::CheckBits { column, k, digest, bits } => {
                if bits.len() != *k as usize {
                    return Err(Error::Contract(format!("{} check bits announced as K = {}", bits.len(), k)));
                }
                body.extend_from_slice(&column.to_le_bytes());
                body.extend_from_slice(&k.to_le_bytes());
                body.extend_from_slice(&digest.to_le_bytes());
                body.extend(bits.to_packed());
            }
            Message::Feedback(f) => body.extend(f.encode()?),
            Message::Packages(pkgs) => {
                body.extend_from_slice(&(pkgs.len() as u32).to_le_bytes());
                for p in pkgs {
                    body.extend_from_slice(&p.order_key.to_le_bytes());
                    body.extend(p.payload.to_packed());
                }
            }
            Message::Checksum(p) => {
                body.extend_from_slice(&p.order_key.to_le_bytes());
                body.extend(p.payload.to_packed());
            }
            Message::Abort(r) => body.push(*r as u8),
            Message::ColumnRequest { column, mode } => {
                body.extend_from_slice(&column.to_le_bytes());
                body.push(*mode as u8);
            }
        }
        let mut frame = (body.len() as u32).to_le_bytes().to_vec();
        frame.extend(body);
        Ok(frame)
    }

    pub fn decode(frame: &[u8], ctx: &WireContext) -> Result<Self> {
        let mut c = Cursor::new(frame);
        let len = c.u32()? as usize;
        if c.rest().len() != len || len == 0 {
            return Err(Error::Format(format!("frame length {} does not match {} bytes", len, c.rest().len())));
        }
        let tag = c.u8()?;
        let pkg_bytes = ctx.package_bits.div_ceil(8);
        let msg = match tag {
            TAG_DEL_COUNT => Message::DelCount { d: c.u32()? },
            TAG_CHECK_BITS => {
                let column = c.u16()?;
                let k = c.u32()?;
                let digest = c.u64()?;
                let bits = BitVec::from_packed(c.take((k as usize).div_ceil(8))?, k as usize)?;
                Message::CheckBits { column, k, digest, bits }
            }
            TAG_FEEDBACK => {
                let payload = ctx.feedback_payload_bits;
                Message::Feedback(FeedbackFrame::decode(c.take_rest(), |_, _| payload)?)
            }
            TAG_PACKAGES => {
                let count = c.u32()? as usize;
                let mut pkgs = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let order_key = c.u64()?;
                    let payload = BitVec::from_packed(c.take(pkg_bytes)?, ctx.package_bits)?;
                    pkgs.push(WirePackage { order_key, payload });
                }
                Message::Packages(pkgs)
            }
            TAG_CHECKSUM => {
                let order_key = c.u64()?;
                let payload = BitVec::from_packed(c.take(pkg_bytes)?, ctx.package_bits)?;
                Message::Checksum(WirePackage { order_key, payload })
            }
            TAG_ABORT => Message::Abort(AbortReason::from_u8(c.u8()?)?),
            TAG_COLUMN_REQUEST => {
                let column = c.u16()?;
                let mode = match c.u8()? {
                    0 => ColumnMode::CheckBits,
                    1 => ColumnMode::Raw,
                    m => return Err(Error::Format(format!("unknown column mode {}", m))),
                };
                Message::ColumnRequest { column, mode }
            }
            other => return Err(Error::Format(format!("unknown message tag {:#04x}", other))),
        };
        if !c.rest().is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in frame", c.rest().len())));
        }
        Ok(msg)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated frame".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> WireContext {
        WireContext { package_bits: 12, feedback_payload_bits: Some(5) }
    }

    #[test]
    fn del_count_layout() {
        let bytes = Message::DelCount { d: 2 }.encode().unwrap();
        assert_eq!(bytes, vec![5, 0, 0, 0, 0x01, 2, 0, 0, 0]);
        assert_eq!(Message::decode(&bytes, &ctx()).unwrap(), Message::DelCount { d: 2 });
    }

    #[test]
    fn check_bits_layout() {
        let m = Message::CheckBits { column: 1, k: 3, digest: 0xAABB, bits: "101".parse().unwrap() };
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 2 + 4 + 8 + 1);
        assert_eq!(bytes[4], 0x02);
        assert_eq!(*bytes.last().unwrap(), 0b1010_0000);
        assert_eq!(Message::decode(&bytes, &ctx()).unwrap(), m);
    }

    #[test]
    fn feedback_frames() {
        let direct = FeedbackFrame { n: 8, d: 2, permutation_seed: 0, body: FeedbackBody::Direct(vec![2, 5]) };
        let bytes = direct.encode().unwrap();
        assert_eq!(bytes.len(), 1 + 4 + 2 + 8 + 2 + 1);
        assert_eq!(*bytes.last().unwrap(), 0b0101_0100);
        assert_eq!(FeedbackFrame::decode(&bytes, |_, _| None).unwrap(), direct);

        let comp = FeedbackFrame {
            n: 16,
            d: 1,
            permutation_seed: 99,
            body: FeedbackBody::Compressed(CompressedFeedback {
                payload: "11001".parse().unwrap(),
                mismatch: vec![3, 15],
            }),
        };
        let bytes = comp.encode().unwrap();
        // two 4-bit indices + 5 payload bits = 13 bits -> 2 bytes
        assert_eq!(bytes.len(), 17 + 2);
        assert_eq!(FeedbackFrame::decode(&bytes, |_, _| Some(5)).unwrap(), comp);
        assert!(FeedbackFrame::decode(&bytes, |_, _| None).is_err());
        assert!(FeedbackFrame::decode(&bytes, |_, _| Some(20)).is_err());
    }

    #[test]
    fn package_messages() {
        let p = WirePackage { order_key: 7, payload: "101100111000".parse().unwrap() };
        let m = Message::Packages(vec![p.clone(), p.clone()]);
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 4 + 2 * (8 + 2));
        assert_eq!(Message::decode(&bytes, &ctx()).unwrap(), m);
        let m = Message::Checksum(p);
        assert_eq!(Message::decode(&m.encode().unwrap(), &ctx()).unwrap(), m);
    }

    #[test]
    fn control_messages() {
        for m in
            [Message::Abort(AbortReason::DecodeFailure), Message::ColumnRequest { column: 3, mode: ColumnMode::Raw }]
        {
            assert_eq!(Message::decode(&m.encode().unwrap(), &ctx()).unwrap(), m);
        }
    }

    #[test]
    fn malformed_frames() {
        let mut bytes = Message::DelCount { d: 2 }.encode().unwrap();
        bytes.push(0);
        assert!(Message::decode(&bytes, &ctx()).is_err());
        assert!(Message::decode(&[1, 0, 0, 0, 0x09], &ctx()).is_err());
        assert!(Message::decode(&[2, 0, 0, 0, 0x06, 9], &ctx()).is_err());
        assert!(Message::decode(&[], &ctx()).is_err());
    }
}
