//! Binary vectors and a small MSB-first bit stream used by the wire formats.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A vector of binary symbols, one byte per symbol (always 0 or 1).
#[derive(Clone, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BitVec(Vec<u8>);

impl BitVec {
    pub fn zeros(len: usize) -> Self {
        BitVec(vec![0; len])
    }

    /// Builds a vector from symbols, rejecting anything other than 0 and 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Domain(format!("non-binary symbol {} at {}", bits[pos], pos)));
        }
        Ok(BitVec(bits))
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(it: I) -> Self {
        BitVec(it.into_iter().map(u8::from).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, bit: u8) {
        self.0[i] = bit & 1;
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] ^= 1;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    /// Indices (0-based) of the set bits, ascending.
    pub fn ones(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect()
    }

    pub fn xor(&self, other: &BitVec) -> Result<BitVec> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!("xor of lengths {} and {}", self.len(), other.len())));
        }
        Ok(BitVec(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect()))
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    /// Packs the bits MSB-first into bytes, zero-padding the tail.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut w = BitWriter::new();
        for b in self.iter() {
            w.push_bit(b);
        }
        w.finish()
    }

    pub fn from_packed(bytes: &[u8], len: usize) -> Result<BitVec> {
        if bytes.len() * 8 < len {
            return Err(Error::Format(format!("{} bytes cannot hold {} bits", bytes.len(), len)));
        }
        let mut r = BitReader::new(bytes);
        let bits = (0..len).map(|_| r.read_bit()).collect::<Result<Vec<_>>>()?;
        Ok(BitVec(bits))
    }
}

impl fmt::Debug for BitVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVec({})", self)
    }
}

impl fmt::Display for BitVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{}", b)?;
        }
        Ok(())
    }
}

impl FromStr for BitVec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != ',' && *c != '_')
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Format(format!("unexpected character {:?} in bit string", other))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(BitVec)
    }
}

impl std::ops::Index<usize> for BitVec {
    type Output = u8;
    fn index(&self, i: usize) -> &u8 {
        &self.0[i]
    }
}

/// MSB-first bit writer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bit(&mut self, bit: u8) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit & 1 == 1 {
            *self.bytes.last_mut().unwrap() |= 0x80 >> self.used;
        }
        self.used = (self.used + 1) % 8;
    }

    /// Writes the low `width` bits of `value`, most significant first.
    pub fn push_uint(&mut self, value: u64, width: u32) {
        for k in (0..width).rev() {
            self.push_bit(((value >> k) & 1) as u8);
        }
    }

    pub fn bit_len(&self) -> usize {
        if self.used == 0 {
            self.bytes.len() * 8
        } else {
            (self.bytes.len() - 1) * 8 + self.used as usize
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit reader over a byte slice.
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<u8> {
        let byte = self.bytes.get(self.pos / 8).ok_or_else(|| Error::Format("bit stream exhausted".into()))?;
        let bit = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read_uint(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..width {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }
}
