//! Fixed-point CDFs and the arithmetic (range) coder that consumes them.

mod cdf;
mod range;

pub use cdf::{
    check_precision, quantize_cdf, QuantizedCdf, DEFAULT_PRECISION, MAX_PRECISION, MIN_PRECISION,
};
pub use range::{decode_symbols, encode_symbols, Bitstream, RangeDecoder, RangeEncoder};

/// Slack in bits between the ideal code length and the emitted bitstream.
pub const CODER_SLACK_BITS: f64 = 64.0;
