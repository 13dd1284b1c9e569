//! Message layout: bits to multi-bit elements to per-position segments, and back.
//!
//! A message of `L` bits is packed MSB-first into elements of
//! `log2(N_r + 1)` bits each. At an encoding scale `s` the element sequence is
//! cut row-major into `(H/s) * (W/s)` equal segments, segment `j` sitting at
//! raster position `j` of the `H/s x W/s` grid. The whole message is present at
//! every scale; only the segment length changes. Capacity is fixed by the
//! coarsest scale: `L = (H/s_max) * (W/s_max) * L_ms * log2(N_r + 1)`.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result, StegoError};
use crate::tensor::{Real, Tensor};

/// Seedable generator used for every message and image draw in the crate:
/// ChaCha with 8 rounds, keyed through `SeedableRng::seed_from_u64`.
pub type MessageRng = ChaCha8Rng;

pub fn message_rng(seed: u64) -> MessageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A non-empty string of bits, one `u8` in `{0, 1}` per bit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            bail!(Data, "message must contain at least one bit");
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            bail!(Data, "bit {i} has value {}", bits[i]);
        }
        Ok(BitMessage { bits })
    }

    /// Uniform random bits drawn 64 at a time from `next_u64`, most significant bit first.
    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        let mut bits = Vec::with_capacity(len);
        while bits.len() < len {
            let word = rng.next_u64();
            for k in (0..64).rev() {
                if bits.len() == len {
                    break;
                }
                bits.push(((word >> k) & 1) as u8);
            }
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Fraction of positions where the two messages agree.
    pub fn accuracy(&self, other: &BitMessage) -> Result<f64> {
        if self.len() != other.len() {
            bail!(Layout, "comparing messages of {} and {} bits", self.len(), other.len());
        }
        let same = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.len() as f64)
    }

    /// `"STGM"`, bit length as u64 LE, then the bits packed 8 per byte MSB-first
    /// with the final byte zero-padded.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len().div_ceil(8));
        out.extend_from_slice(MESSAGE_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (k, &b) in chunk.iter().enumerate() {
                byte |= b << (7 - k);
            }
            out.push(byte);
        }
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MESSAGE_MAGIC {
            bail!(Format, "not a message file");
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() != len.div_ceil(8) {
            bail!(Format, "message file declares {len} bits but holds {} bytes", body.len());
        }
        let bits = (0..len).map(|i| (body[i / 8] >> (7 - i % 8)) & 1).collect();
        Self::new(bits)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

pub const MESSAGE_MAGIC: &[u8; 4] = b"STGM";

/// Geometry of the message grid for one cover size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutConfig {
    /// Segment length (elements) at the coarsest scale.
    pub l_ms: usize,
    /// Largest element value; elements range over `0..=n_r`.
    pub n_r: u32,
    pub height: usize,
    pub width: usize,
    /// Spatial divisor of each encoding stage.
    pub scales: Vec<usize>,
}

impl LayoutConfig {
    pub fn new(l_ms: usize, n_r: u32, height: usize, width: usize) -> Self {
        LayoutConfig { l_ms, n_r, height, width, scales: vec![2, 4, 4] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_ms == 0 {
            bail!(Config, "segment length must be positive");
        }
        if self.n_r == 0 || !(self.n_r + 1).is_power_of_two() {
            bail!(Config, "N_r + 1 = {} is not a power of two >= 2", self.n_r as u64 + 1);
        }
        if self.scales.is_empty() {
            bail!(Config, "at least one encoding scale is required");
        }
        let count = self.element_count_unchecked();
        for &s in &self.scales {
            if s == 0 || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) {
                bail!(Config, "{}x{} cover is not divisible by scale {s}", self.height, self.width);
            }
            let p = (self.height / s) * (self.width / s);
            if !count.is_multiple_of(p) {
                bail!(Config, "{count} elements do not split evenly over {p} positions at scale {s}");
            }
        }
        Ok(())
    }

    pub fn bits_per_element(&self) -> usize {
        (self.n_r + 1).trailing_zeros() as usize
    }

    pub fn coarsest_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    pub fn positions(&self, scale: usize) -> usize {
        (self.height / scale) * (self.width / scale)
    }

    fn element_count_unchecked(&self) -> usize {
        let s = self.coarsest_scale().max(1);
        (self.height / s) * (self.width / s) * self.l_ms
    }

    /// Number of message elements, `N_ms * L_ms` at the coarsest scale.
    pub fn element_count(&self) -> usize {
        self.element_count_unchecked()
    }

    /// Message length in bits.
    pub fn bit_len(&self) -> usize {
        self.element_count() * self.bits_per_element()
    }

    /// Segment length at `scale`.
    pub fn segment_len(&self, scale: usize) -> usize {
        self.element_count() / self.positions(scale)
    }

    /// Split `bits` into one segmented grid per configured scale.
    pub fn encode(&self, bits: &BitMessage) -> Result<Vec<SegmentedMessage>> {
        self.validate()?;
        if bits.len() != self.bit_len() {
            bail!(Layout, "message has {} bits, layout holds {}", bits.len(), self.bit_len());
        }
        let elements = pack(bits, self.n_r)?;
        self.scales.iter().map(|&s| segment(&elements, self, s)).collect()
    }

    /// Inverse of [`encode`](Self::encode) for a single grid.
    pub fn decode(&self, msg: &SegmentedMessage) -> Result<BitMessage> {
        if msg.n_r != self.n_r {
            bail!(Layout, "grid uses N_r = {}, layout uses {}", msg.n_r, self.n_r);
        }
        unpack(&desegment(msg), self.n_r)
    }
}

/// Bits per pixel carried by a layout: `L_ms * log2(N_r + 1) / s_max^2`.
pub fn capacity_bpp(cfg: &LayoutConfig) -> Result<f64> {
    cfg.validate()?;
    let s = cfg.coarsest_scale() as f64;
    Ok((cfg.l_ms * cfg.bits_per_element()) as f64 / (s * s))
}

fn bits_per(n_r: u32) -> Result<usize> {
    if n_r == 0 || !(n_r + 1).is_power_of_two() {
        bail!(Config, "N_r + 1 = {} is not a power of two >= 2", n_r as u64 + 1);
    }
    Ok((n_r + 1).trailing_zeros() as usize)
}

/// Groups of `log2(N_r + 1)` consecutive bits become one element, MSB first.
pub fn pack(bits: &BitMessage, n_r: u32) -> Result<Vec<u32>> {
    let k = bits_per(n_r)?;
    if !bits.len().is_multiple_of(k) {
        bail!(Layout, "{} bits do not split into {k}-bit elements", bits.len());
    }
    Ok(bits.bits().chunks(k).map(|c| c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32)).collect())
}

pub fn unpack(elements: &[u32], n_r: u32) -> Result<BitMessage> {
    let k = bits_per(n_r)?;
    let mut bits = Vec::with_capacity(elements.len() * k);
    for (i, &e) in elements.iter().enumerate() {
        if e > n_r {
            bail!(Data, "element {i} = {e} exceeds N_r = {n_r}");
        }
        for j in (0..k).rev() {
            bits.push(((e >> j) & 1) as u8);
        }
    }
    BitMessage::new(bits)
}

/// `segments x seg_len` grid of elements in `0..=n_r`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedMessage {
    elements: Vec<u32>,
    segments: usize,
    seg_len: usize,
    n_r: u32,
}

impl SegmentedMessage {
    pub fn new(elements: Vec<u32>, segments: usize, seg_len: usize, n_r: u32) -> Result<Self> {
        if segments * seg_len != elements.len() || elements.is_empty() {
            bail!(Layout, "{} elements cannot form a {segments}x{seg_len} grid", elements.len());
        }
        if let Some(&e) = elements.iter().find(|&&e| e > n_r) {
            bail!(Data, "element {e} exceeds N_r = {n_r}");
        }
        Ok(SegmentedMessage { elements, segments, seg_len, n_r })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn n_r(&self) -> u32 {
        self.n_r
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.elements[j * self.seg_len..(j + 1) * self.seg_len]
    }

    pub fn elements(&self) -> &[u32] {
        &self.elements
    }
}

/// Row-major partition of `elements` into `positions` equal segments.
pub fn segment_into(elements: &[u32], positions: usize, n_r: u32) -> Result<SegmentedMessage> {
    if positions == 0 || !elements.len().is_multiple_of(positions) {
        bail!(Layout, "{} elements do not split over {positions} positions", elements.len());
    }
    SegmentedMessage::new(elements.to_vec(), positions, elements.len() / positions, n_r)
}

pub fn segment(elements: &[u32], cfg: &LayoutConfig, scale: usize) -> Result<SegmentedMessage> {
    if scale == 0 || !cfg.height.is_multiple_of(scale) || !cfg.width.is_multiple_of(scale) {
        bail!(Config, "scale {scale} does not divide {}x{}", cfg.height, cfg.width);
    }
    segment_into(elements, cfg.positions(scale), cfg.n_r)
}

pub fn desegment(msg: &SegmentedMessage) -> Vec<u32> {
    msg.elements.clone()
}

/// Network target: element `e` becomes `e / N_r`, shape `[segments, seg_len]`.
pub fn normalize_elements<T: Real>(msg: &SegmentedMessage) -> Tensor<T> {
    let inv = 1.0 / msg.n_r as f64;
    Tensor::from_fn(&[msg.segments, msg.seg_len], |i| T::cst(msg.elements[i] as f64 * inv))
}

/// Hard decision on normalized predictions: `clamp(round(p * N_r), 0, N_r)`.
/// For `N_r = 1` this is a threshold at 0.5 with ties going to 1.
pub fn denormalize<T: Real>(pred: &Tensor<T>, n_r: u32) -> Result<SegmentedMessage> {
    if pred.rank() != 2 {
        bail!(Dimension, "predictions must be [segments, seg_len], got {:?}", pred.shape());
    }
    let elements = pred
        .data()
        .iter()
        .map(|&p| {
            let v = (p.to_f64c() * n_r as f64).round();
            if v.is_nan() {
                0
            } else {
                v.clamp(0.0, n_r as f64) as u32
            }
        })
        .collect();
    SegmentedMessage::new(elements, pred.shape()[0], pred.shape()[1], n_r)
}

impl TryFrom<&[u8]> for BitMessage {
    type Error = StegoError;

    fn try_from(v: &[u8]) -> Result<Self> {
        BitMessage::new(v.to_vec())
    }
}
