//! Lossless coding of binary masks and the final-model artifact.
//!
//! Masks are coded with a static two-symbol range coder: the probability of a one
//! is the mask's own frequency `ones / n`, clamped to `[1/(2n), 1 - 1/(2n)]`, and is
//! recomputed by the decoder from the header. The coder keeps a 32-bit range with
//! byte-wise renormalization and carry propagation through a cached byte.
//!
//! Wire layout of a coded mask: `n: u64 LE`, `ones: u64 LE`, then the payload.
//! Model artifact: `"FPM1"`, `version: u8`, architecture record, `seed: u64 LE`,
//! coded mask.

use crate::mask::BinaryMask;
use crate::nn::NetworkArch;
use crate::{Error, Result};

const TOP: u32 = 1 << 24;
const HEADER_BYTES: usize = 16;

/// Probability of a zero bit in units of 2^-32, derived only from the header.
fn zero_probability(n: u64, ones: u64) -> u64 {
    const ONE: u128 = 1 << 32;
    let n = n as u128;
    let floor = (ONE / (2 * n)).max(1);
    let p_one = (ones as u128 * ONE / n).clamp(floor, ONE - floor);
    (ONE - p_one) as u64
}

#[inline]
fn split(range: u32, p_zero: u64) -> u32 {
    let bound = ((range as u64 * p_zero) >> 32) as u32;
    bound.clamp(1, range - 1)
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new(capacity: usize) -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::with_capacity(capacity),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                // The very first cached byte is always zero; it is not transmitted.
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                } else {
                    debug_assert_eq!(byte.wrapping_add(carry), 0);
                    self.started = true;
                }
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, bit: bool, p_zero: u64) {
        let bound = split(self.range, p_zero);
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        let head = input
            .get(..4)
            .ok_or_else(|| Error::Decode("payload shorter than the coder state".into()))?;
        Ok(Self {
            code: u32::from_be_bytes(head.try_into().unwrap()),
            range: u32::MAX,
            input,
            pos: 4,
        })
    }

    fn decode(&mut self, p_zero: u64) -> Result<bool> {
        let bound = split(self.range, p_zero);
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        while self.range < TOP {
            let byte = *self
                .input
                .get(self.pos)
                .ok_or_else(|| Error::Decode("payload truncated".into()))?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        Ok(bit)
    }
}

/// Entropy-coded binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedMask {
    pub n: u64,
    pub ones_count: u64,
    pub payload: Vec<u8>,
}

impl CodedMask {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.ones_count.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse the uplink wire format; the payload is everything after the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Decode("coded mask shorter than its header".into()));
        }
        let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let ones_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        Ok(Self {
            n,
            ones_count,
            payload: bytes[HEADER_BYTES..].to_vec(),
        })
    }

    /// Total size in bits, header included.
    pub fn total_bits(&self) -> u64 {
        8 * (HEADER_BYTES + self.payload.len()) as u64
    }

    pub fn payload_bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }
}

pub fn encode_mask(mask: &BinaryMask) -> Result<CodedMask> {
    if mask.is_empty() {
        return Err(Error::Precondition("cannot code an empty mask".into()));
    }
    let n = mask.len() as u64;
    let ones = mask.count_ones() as u64;
    let p_zero = zero_probability(n, ones);
    let mut enc = RangeEncoder::new(mask.len() / 8 + 8);
    for &bit in mask.bits() {
        enc.encode(bit, p_zero);
    }
    Ok(CodedMask {
        n,
        ones_count: ones,
        payload: enc.finish(),
    })
}

pub fn decode_mask(coded: &CodedMask) -> Result<BinaryMask> {
    if coded.n == 0 {
        return Err(Error::Decode("mask length is zero".into()));
    }
    if coded.ones_count > coded.n {
        return Err(Error::Decode(format!(
            "header claims {} ones in {} bits",
            coded.ones_count, coded.n
        )));
    }
    let n = usize::try_from(coded.n).map_err(|_| Error::Decode("mask too long".into()))?;
    let p_zero = zero_probability(coded.n, coded.ones_count);
    let mut dec = RangeDecoder::new(&coded.payload)?;
    let mut bits = Vec::with_capacity(n.min(1 << 24));
    let mut ones = 0u64;
    for _ in 0..n {
        let b = dec.decode(p_zero)?;
        ones += u64::from(b);
        bits.push(b);
    }
    if dec.pos != coded.payload.len() {
        return Err(Error::Decode(format!(
            "{} trailing payload bytes",
            coded.payload.len() - dec.pos
        )));
    }
    if ones != coded.ones_count {
        return Err(Error::Decode(format!(
            "decoded {ones} ones but the header declares {}",
            coded.ones_count
        )));
    }
    Ok(BinaryMask::from_bits(bits))
}

/// Coded size per mask entry, header included.
pub fn bitrate(coded: &CodedMask) -> f64 {
    coded.total_bits() as f64 / coded.n as f64
}

/// Binary entropy in bits, with `0 lg 0 = 0`.
pub fn empirical_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

pub const MODEL_MAGIC: &[u8; 4] = b"FPM1";
pub const MODEL_VERSION: u8 = 1;

/// Final model: seed, architecture and coded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub arch: NetworkArch,
    pub seed: u64,
    pub mask: CodedMask,
}

impl ModelArtifact {
    pub fn new(arch: NetworkArch, seed: u64, mask: &BinaryMask) -> Result<Self> {
        if mask.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "mask has {} entries but the architecture has {} weights",
                mask.len(),
                arch.param_count()
            )));
        }
        Ok(Self {
            arch,
            seed,
            mask: encode_mask(mask)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        self.arch.write_record(&mut out);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.mask.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(MODEL_MAGIC.as_slice()) {
            return Err(Error::Format("not a model artifact (bad magic)".into()));
        }
        match bytes.get(4) {
            Some(&MODEL_VERSION) => {}
            other => {
                return Err(Error::Format(format!("unsupported artifact version {other:?}")));
            }
        }
        let (arch, used) = NetworkArch::read_record(&bytes[5..])?;
        let rest = &bytes[5 + used..];
        let seed_bytes = rest
            .get(..8)
            .ok_or_else(|| Error::Format("artifact truncated before the seed".into()))?;
        let seed = u64::from_le_bytes(seed_bytes.try_into().unwrap());
        let mask = CodedMask::from_bytes(&rest[8..]).map_err(|e| Error::Format(e.to_string()))?;
        if mask.n != arch.param_count() as u64 {
            return Err(Error::Format(format!(
                "mask length {} does not match the architecture ({} weights)",
                mask.n,
                arch.param_count()
            )));
        }
        Ok(Self { arch, seed, mask })
    }

    pub fn decode_mask(&self) -> Result<BinaryMask> {
        decode_mask(&self.mask)
    }

    /// Artifact size in bits per model parameter.
    pub fn bitrate(&self) -> f64 {
        8.0 * self.to_bytes().len() as f64 / self.arch.param_count() as f64
    }
}

pub fn serialize_model(arch: &NetworkArch, seed: u64, mask: &BinaryMask) -> Result<Vec<u8>> {
    Ok(ModelArtifact::new(arch.clone(), seed, mask)?.to_bytes())
}

pub fn deserialize_model(bytes: &[u8]) -> Result<(NetworkArch, u64, BinaryMask)> {
    let artifact = ModelArtifact::from_bytes(bytes)?;
    let mask = artifact.decode_mask()?;
    Ok((artifact.arch, artifact.seed, mask))
}
