//! Carry-propagating range coder with a 32-bit window and byte renormalization.
//!
//! The encoder keeps `low` in a u64 so that a carry out of the 32-bit window
//! shows up in bit 32; pending 0xFF bytes are held back until the carry is
//! resolved. Interval splits are computed as `(range * cum) >> precision`,
//! which keeps the top symbol's upper edge exactly at `low + range`.
//!
//! The flush picks the value with the most trailing zeros inside the final
//! interval and drops trailing zero bits; the decoder reads zeros past the end
//! of the stream.

use crate::coder::cdf::QuantizedCdf;
use crate::error::{Error, Result};

const TOP: u64 = 1 << 24;
const WINDOW: u64 = 1 << 32;

/// Encoded bytes plus the exact number of meaningful bits. Bits past
/// `bit_length` in the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_length: u64,
}

impl Bitstream {
    /// Wraps bytes from a container; `bit_length` must match the byte count and
    /// the padding must be zero.
    pub fn from_parts(bytes: Vec<u8>, bit_length: u64) -> Result<Self> {
        if bytes.len() as u64 != bit_length.div_ceil(8) {
            return Err(Error::CorruptStream(format!(
                "{} bytes cannot hold exactly {bit_length} bits",
                bytes.len()
            )));
        }
        let pad = (bytes.len() as u64 * 8 - bit_length) as u32;
        if let Some(&last) = bytes.last() {
            if pad > 0 && last & ((1u8 << pad) - 1) != 0 {
                return Err(Error::CorruptStream("non-zero padding bits".into()));
            }
        }
        Ok(Self { bytes, bit_length })
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    leading: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: WINDOW - 1,
            cache: 0,
            pending: 1,
            leading: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: u8) {
        let p = cdf.precision();
        let lo = (self.range * cdf.low(symbol) as u64) >> p;
        let hi = (self.range * cdf.high(symbol) as u64) >> p;
        self.low += lo;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= WINDOW {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        // the first byte is the integer part of the code value, always zero
        if self.leading {
            self.leading = false;
        } else {
            self.out.push(byte);
        }
    }

    pub fn finish(mut self) -> Bitstream {
        let last = self.low + self.range - 1;
        let mut k = 40;
        let value = loop {
            let mask = (1u64 << k) - 1;
            let v = (self.low + mask) & !mask;
            if v <= last {
                break v;
            }
            k -= 1;
        };
        self.low = value;
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        let bit_length = match self.out.last() {
            Some(b) => self.out.len() as u64 * 8 - b.trailing_zeros() as u64,
            None => 0,
        };
        Bitstream {
            bytes: self.out,
            bit_length,
        }
    }
}

/// Decoder that also re-runs the encoder on every decoded symbol, so
/// [`RangeDecoder::finish`] can reject any stream that is not exactly the
/// encoding of what was decoded.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    input: &'a Bitstream,
    pos: usize,
    code: u64,
    range: u64,
    mirror: RangeEncoder,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a Bitstream) -> Self {
        let mut dec = Self {
            input,
            pos: 0,
            code: 0,
            range: WINDOW - 1,
            mirror: RangeEncoder::new(),
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte() as u64;
        }
        dec
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<u8> {
        if self.code >= self.range {
            return Err(Error::CorruptStream(
                "code value outside the coding interval".into(),
            ));
        }
        let p = cdf.precision();
        let cum = cdf.cumulative();
        let split = |i: usize| (self.range * cum[i] as u64) >> p;
        // largest symbol whose lower edge is <= code
        let (mut lo, mut hi) = (0usize, 256usize);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if split(mid) <= self.code {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let symbol = lo as u8;
        let start = split(lo);
        let end = split(lo + 1);
        self.code -= start;
        self.range = end - start;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u64;
        }
        self.mirror.encode(cdf, symbol);
        Ok(symbol)
    }

    /// Checks that the input is the canonical encoding of the decoded symbols.
    pub fn finish(self) -> Result<()> {
        let expected = self.mirror.finish();
        if expected.bit_length != self.input.bit_length || expected.bytes != self.input.bytes {
            return Err(Error::CorruptStream(format!(
                "bitstream of {} bits does not match the {}-bit encoding of the decoded symbols \
                 (truncated or damaged)",
                self.input.bit_length, expected.bit_length
            )));
        }
        Ok(())
    }
}

/// Encodes `symbols`; `cdf_source(i, prefix)` returns the CDF for symbol `i`
/// given the already coded `prefix = symbols[..i]`.
pub fn encode_symbols<F>(symbols: &[u8], mut cdf_source: F) -> Result<Bitstream>
where
    F: FnMut(usize, &[u8]) -> Result<QuantizedCdf>,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let cdf = cdf_source(i, &symbols[..i])?;
        enc.encode(&cdf, s);
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols; `cdf_source` must reproduce the encoder's CDFs.
pub fn decode_symbols<F>(bits: &Bitstream, n: usize, mut cdf_source: F) -> Result<Vec<u8>>
where
    F: FnMut(usize, &[u8]) -> Result<QuantizedCdf>,
{
    if bits.bytes.len() as u64 != bits.bit_length.div_ceil(8) {
        return Err(Error::CorruptStream(format!(
            "{} bytes cannot hold exactly {} bits",
            bits.bytes.len(),
            bits.bit_length
        )));
    }
    let mut dec = RangeDecoder::new(bits);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cdf = cdf_source(i, &out)?;
        let s = dec.decode(&cdf)?;
        out.push(s);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(_: usize, _: &[u8]) -> Result<QuantizedCdf> {
        QuantizedCdf::uniform(16)
    }

    #[test]
    fn empty_sequence() {
        let bits = encode_symbols(&[], uniform).unwrap();
        assert!(bits.bit_length <= 64);
        assert_eq!(decode_symbols(&bits, 0, uniform).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn small_roundtrip() {
        let bits = encode_symbols(&[0, 255, 128], uniform).unwrap();
        assert_eq!(
            decode_symbols(&bits, 3, uniform).unwrap(),
            vec![0, 255, 128]
        );
        assert!(bits.bit_length <= 24 + 64);
    }

    #[test]
    fn uniform_length_window() {
        let symbols: Vec<u8> = (0..10_000u32).map(|i| (i * 7919 % 256) as u8).collect();
        let bits = encode_symbols(&symbols, uniform).unwrap();
        assert!(
            (79_984..=80_064).contains(&bits.bit_length),
            "{} bits",
            bits.bit_length
        );
        assert_eq!(
            decode_symbols(&bits, symbols.len(), uniform).unwrap(),
            symbols
        );
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let symbols: Vec<u8> = (0..500u32).map(|i| (i * 31 % 251) as u8).collect();
        let bits = encode_symbols(&symbols, uniform).unwrap();
        for cut in [1usize, 2, 8, bits.bytes.len() / 2] {
            let truncated = Bitstream {
                bytes: bits.bytes[..bits.bytes.len() - cut].to_vec(),
                bit_length: bits.bit_length,
            };
            let err = decode_symbols(&truncated, symbols.len(), uniform).unwrap_err();
            assert!(matches!(err, Error::CorruptStream(_)), "{err:?}");
        }
    }

    #[test]
    fn damaged_stream_is_rejected() {
        let symbols: Vec<u8> = (0..200u32).map(|i| (i * 17 % 256) as u8).collect();
        let mut bits = encode_symbols(&symbols, uniform).unwrap();
        // a trailing zero byte is not the canonical flush
        bits.bytes.push(0);
        bits.bit_length = bits.bytes.len() as u64 * 8;
        assert!(decode_symbols(&bits, symbols.len(), uniform).is_err());
    }

    #[test]
    fn short_symbol_count_is_rejected() {
        let bits = encode_symbols(&[1, 2, 3, 4], uniform).unwrap();
        assert!(decode_symbols(&bits, 3, uniform).is_err());
        assert!(decode_symbols(&bits, 2, uniform).is_err());
    }

    #[test]
    fn zero_stream_for_certain_symbol() {
        let mut f = [1u32; 256];
        f[0] = 65536 - 255;
        let cdf = QuantizedCdf::from_frequencies(&f, 16).unwrap();
        let bits = encode_symbols(&[0; 100], |_, _| Ok(cdf.clone())).unwrap();
        assert_eq!(bits.bit_length, 0);
        assert_eq!(
            decode_symbols(&bits, 100, |_, _| Ok(cdf.clone())).unwrap(),
            vec![0; 100]
        );
    }

    #[test]
    fn bitstream_parts_validation() {
        assert!(Bitstream::from_parts(vec![0x80], 1).is_ok());
        assert!(Bitstream::from_parts(vec![0x81], 1).is_err());
        assert!(Bitstream::from_parts(vec![0x80, 0], 1).is_err());
        assert!(Bitstream::from_parts(vec![], 0).is_ok());
    }

    /// Random valid CDF, optionally floor-heavy or near-degenerate.
    fn cdf_from_seed(seed: u64, precision: u32, style: u8) -> QuantizedCdf {
        let total = 1u64 << precision;
        let mut x = seed | 1;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x
        };
        let mut w = [0u64; 256];
        match style % 3 {
            0 => w.iter_mut().for_each(|v| *v = next() % 1000),
            1 => w[(next() % 256) as usize] = 1_000_000,
            _ => (0..4).for_each(|_| w[(next() % 256) as usize] += next() % 1000),
        }
        let spare = total - 256;
        let sum: u64 = w.iter().sum::<u64>().max(1);
        let mut f = [1u32; 256];
        let mut used = 0;
        for z in 0..256 {
            let add = w[z] * spare / sum;
            f[z] += add as u32;
            used += add;
        }
        f[(seed % 256) as usize] += (spare - used) as u32;
        QuantizedCdf::from_frequencies(&f, precision).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip_and_length_bound(
            symbols in proptest::collection::vec(any::<u8>(), 0..5000),
            seed in any::<u64>(),
            precision in 8u32..=24,
            style in any::<u8>(),
        ) {
            let cdfs: Vec<_> = (0..symbols.len())
                .map(|i| cdf_from_seed(seed.wrapping_add(i as u64 * 0x9E37_79B9), precision, style))
                .collect();
            let bits = encode_symbols(&symbols, |i, _| Ok(cdfs[i].clone())).unwrap();
            let ideal: f64 = symbols.iter().zip(&cdfs).map(|(&s, c)| c.cost_bits(s)).sum();
            prop_assert!(bits.bit_length as f64 <= ideal + 64.0, "{} > {}", bits.bit_length, ideal);
            let back = decode_symbols(&bits, symbols.len(), |i, _| Ok(cdfs[i].clone())).unwrap();
            prop_assert_eq!(back, symbols);
        }
    }
}
