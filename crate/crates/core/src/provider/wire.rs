//! Remote provider wire protocol, version 1.
//!
//! Every message travels in a frame: `u32` little-endian payload length, then
//! the payload. The first payload byte is the message type. All integers are
//! little-endian; strings are a `u32` byte length followed by UTF-8.
//!
//! | type | message          | body                                                     |
//! |------|------------------|----------------------------------------------------------|
//! | 0x01 | INIT             | version u8, prompt str, ordering u8, map fingerprint u64, expects-deterministic u8 |
//! | 0x02 | PREDICT          | session u64, count u32, `count` symbol bytes             |
//! | 0x03 | RESET            | session u64                                              |
//! | 0x04 | PREDICT_BATCH    | n u32, then n x (session u64, count u32, symbols)        |
//! | 0x05 | PREDICT_FULL     | as PREDICT; answered with the whole vocabulary           |
//! | 0x81 | INIT_OK          | vocab u32, window u32, 256 x token id u32, model fingerprint u64, prompt tokens u32 |
//! | 0x82 | LOGITS           | 256 x f32 (1024 bytes)                                   |
//! | 0x83 | RESET_OK         | empty                                                    |
//! | 0x84 | LOGITS_BATCH     | n u32, then n x 1024 logit bytes                         |
//! | 0x85 | LOGITS_FULL      | n u32, then n x f32 (one per vocabulary entry)           |
//! | 0xFF | ERROR            | code u8, message str                                     |
//!
//! PREDICT carries only the symbols observed since the session's previous
//! PREDICT (or RESET). A batch behaves exactly like its entries sent one by one
//! in order. PREDICT_FULL exists so a client can check the server-side gather
//! against its own gather once per connection.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::image::OrderingMode;

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_FRAME_LEN: usize = 64 << 20;
pub const LOGITS_BYTES: usize = 256 * 4;

const T_INIT: u8 = 0x01;
const T_PREDICT: u8 = 0x02;
const T_RESET: u8 = 0x03;
const T_PREDICT_BATCH: u8 = 0x04;
const T_PREDICT_FULL: u8 = 0x05;
const T_INIT_OK: u8 = 0x81;
const T_LOGITS: u8 = 0x82;
const T_RESET_OK: u8 = 0x83;
const T_LOGITS_BATCH: u8 = 0x84;
const T_LOGITS_FULL: u8 = 0x85;
const T_ERROR: u8 = 0xFF;

pub type Logits = [f32; 256];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitRequest {
    pub version: u8,
    pub prompt_text: String,
    pub ordering_mode: OrderingMode,
    /// Expected digital token map fingerprint, 0 when unknown.
    pub map_fingerprint: u64,
    pub expects_deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitResponse {
    pub vocab_size: u32,
    pub context_window: u32,
    pub digital_token_ids: Box<[u32; 256]>,
    pub model_fingerprint: u64,
    /// Tokens the INIT prompt occupies in every session of this connection.
    pub prompt_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictEntry {
    pub session_id: u64,
    pub new_symbols: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Init(InitRequest),
    Predict(PredictEntry),
    Reset { session_id: u64 },
    PredictBatch(Vec<PredictEntry>),
    PredictFull(PredictEntry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    TokenizerUnsuitable = 1,
    ContextOverflow = 2,
    Unavailable = 3,
    BadRequest = 4,
    Nondeterministic = 5,
    WrongMap = 6,
}

impl ErrorCode {
    fn from_u8(v: u8) -> ErrorCode {
        match v {
            1 => ErrorCode::TokenizerUnsuitable,
            2 => ErrorCode::ContextOverflow,
            3 => ErrorCode::Unavailable,
            5 => ErrorCode::Nondeterministic,
            6 => ErrorCode::WrongMap,
            _ => ErrorCode::BadRequest,
        }
    }

    /// Maps a remote error onto the local error type.
    pub fn into_error(self, message: String) -> Error {
        match self {
            ErrorCode::TokenizerUnsuitable => Error::TokenizerUnsuitable(message),
            ErrorCode::ContextOverflow => Error::ContextOverflow {
                needed: 0,
                window: 0,
            },
            ErrorCode::WrongMap => Error::WrongProvider(message),
            ErrorCode::Unavailable | ErrorCode::BadRequest | ErrorCode::Nondeterministic => {
                Error::ProviderUnavailable(message)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Init(InitResponse),
    Logits(Box<Logits>),
    ResetOk,
    LogitsBatch(Vec<Logits>),
    LogitsFull(Vec<f32>),
    Error { code: ErrorCode, message: String },
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => {
                return Err(Error::ProviderUnavailable(
                    "connection closed mid-frame".into(),
                ))
            }
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::CorruptProviderOutput(format!(
            "frame of {len} bytes exceeds the {MAX_FRAME_LEN}-byte limit"
        )));
    }
    let mut payload = vec![0; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        Writer(vec![kind])
    }
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.0.extend_from_slice(v);
        self
    }
    fn logits(&mut self, v: &Logits) -> &mut Self {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        self
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptProviderOutput("truncated message".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::CorruptProviderOutput("string is not UTF-8".into()))
    }
    fn logits(&mut self) -> Result<Logits> {
        let raw = self.take(LOGITS_BYTES)?;
        Ok(std::array::from_fn(|z| {
            f32::from_le_bytes(raw[4 * z..4 * z + 4].try_into().unwrap())
        }))
    }
    fn entry(&mut self) -> Result<PredictEntry> {
        Ok(PredictEntry {
            session_id: self.u64()?,
            new_symbols: self.bytes()?.to_vec(),
        })
    }
    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::CorruptProviderOutput(format!(
                "{} trailing bytes after message",
                self.buf.len() - self.pos
            )))
        }
    }
}

fn message<'a>(payload: &'a [u8]) -> Result<(u8, Reader<'a>)> {
    let (&kind, _) = payload
        .split_first()
        .ok_or_else(|| Error::CorruptProviderOutput("empty message".into()))?;
    Ok((
        kind,
        Reader {
            buf: payload,
            pos: 1,
        },
    ))
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Request::Init(r) => {
                let mut w = Writer::new(T_INIT);
                w.u8(r.version)
                    .bytes(r.prompt_text.as_bytes())
                    .u8(r.ordering_mode.tag())
                    .u64(r.map_fingerprint)
                    .u8(r.expects_deterministic as u8);
                w.0
            }
            Request::Predict(e) => {
                let mut w = Writer::new(T_PREDICT);
                w.u64(e.session_id).bytes(&e.new_symbols);
                w.0
            }
            Request::PredictFull(e) => {
                let mut w = Writer::new(T_PREDICT_FULL);
                w.u64(e.session_id).bytes(&e.new_symbols);
                w.0
            }
            Request::Reset { session_id } => {
                let mut w = Writer::new(T_RESET);
                w.u64(*session_id);
                w.0
            }
            Request::PredictBatch(entries) => {
                let mut w = Writer::new(T_PREDICT_BATCH);
                w.u32(entries.len() as u32);
                for e in entries {
                    w.u64(e.session_id).bytes(&e.new_symbols);
                }
                w.0
            }
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let (kind, mut r) = message(payload)?;
        let req = match kind {
            T_INIT => Request::Init(InitRequest {
                version: r.u8()?,
                prompt_text: r.string()?,
                ordering_mode: OrderingMode::from_tag(r.u8()?).ok_or_else(|| {
                    Error::CorruptProviderOutput("unknown ordering mode tag".into())
                })?,
                map_fingerprint: r.u64()?,
                expects_deterministic: r.u8()? != 0,
            }),
            T_PREDICT => Request::Predict(r.entry()?),
            T_PREDICT_FULL => Request::PredictFull(r.entry()?),
            T_RESET => Request::Reset {
                session_id: r.u64()?,
            },
            T_PREDICT_BATCH => {
                let n = r.u32()? as usize;
                let entries = (0..n).map(|_| r.entry()).collect::<Result<Vec<_>>>()?;
                Request::PredictBatch(entries)
            }
            other => {
                return Err(Error::CorruptProviderOutput(format!(
                    "unknown request type 0x{other:02x}"
                )))
            }
        };
        r.done()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Init(r) => {
                let mut w = Writer::new(T_INIT_OK);
                w.u32(r.vocab_size).u32(r.context_window);
                for &id in r.digital_token_ids.iter() {
                    w.u32(id);
                }
                w.u64(r.model_fingerprint).u32(r.prompt_tokens);
                w.0
            }
            Response::Logits(l) => {
                let mut w = Writer::new(T_LOGITS);
                w.logits(l);
                w.0
            }
            Response::ResetOk => vec![T_RESET_OK],
            Response::LogitsBatch(all) => {
                let mut w = Writer::new(T_LOGITS_BATCH);
                w.u32(all.len() as u32);
                for l in all {
                    w.logits(l);
                }
                w.0
            }
            Response::LogitsFull(all) => {
                let mut w = Writer::new(T_LOGITS_FULL);
                w.u32(all.len() as u32);
                for x in all {
                    w.0.extend_from_slice(&x.to_le_bytes());
                }
                w.0
            }
            Response::Error { code, message } => {
                let mut w = Writer::new(T_ERROR);
                w.u8(*code as u8).bytes(message.as_bytes());
                w.0
            }
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let (kind, mut r) = message(payload)?;
        let resp = match kind {
            T_INIT_OK => {
                let vocab_size = r.u32()?;
                let context_window = r.u32()?;
                let mut ids = Box::new([0u32; 256]);
                for id in ids.iter_mut() {
                    *id = r.u32()?;
                }
                Response::Init(InitResponse {
                    vocab_size,
                    context_window,
                    digital_token_ids: ids,
                    model_fingerprint: r.u64()?,
                    prompt_tokens: r.u32()?,
                })
            }
            T_LOGITS => Response::Logits(Box::new(r.logits()?)),
            T_RESET_OK => Response::ResetOk,
            T_LOGITS_BATCH => {
                let n = r.u32()? as usize;
                let all = (0..n).map(|_| r.logits()).collect::<Result<Vec<_>>>()?;
                Response::LogitsBatch(all)
            }
            T_LOGITS_FULL => {
                let n = r.u32()? as usize;
                let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                    Error::CorruptProviderOutput("vocabulary size overflow".into())
                })?)?;
                Response::LogitsFull(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            T_ERROR => Response::Error {
                code: ErrorCode::from_u8(r.u8()?),
                message: r.string()?,
            },
            other => {
                return Err(Error::CorruptProviderOutput(format!(
                    "unknown response type 0x{other:02x}"
                )))
            }
        };
        r.done()?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logits_frame_is_1024_bytes() {
        let payload = Response::Logits(Box::new([1.5; 256])).encode();
        assert_eq!(payload.len(), 1 + LOGITS_BYTES);
        assert_eq!(&payload[1..5], &1.5f32.to_le_bytes());
    }

    #[test]
    fn frame_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let big = ((MAX_FRAME_LEN + 1) as u32).to_le_bytes();
        assert!(read_frame(&mut &big[..]).is_err());
        let mut short = 10u32.to_le_bytes().to_vec();
        short.extend_from_slice(b"abc");
        assert!(read_frame(&mut &short[..]).is_err());
        assert!(read_frame(&mut &[1u8, 0][..]).is_err());
    }

    #[test]
    fn init_layout() {
        let req = Request::Init(InitRequest {
            version: 1,
            prompt_text: "hi".into(),
            ordering_mode: OrderingMode::ChannelIndependent,
            map_fingerprint: 0x0102030405060708,
            expects_deterministic: true,
        });
        let bytes = req.encode();
        assert_eq!(
            bytes,
            vec![0x01, 1, 2, 0, 0, 0, b'h', b'i', 1, 8, 7, 6, 5, 4, 3, 2, 1, 1]
        );
        assert_eq!(Request::decode(&bytes).unwrap(), req);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Request::decode(&[]).is_err());
        assert!(Request::decode(&[0x7e]).is_err());
        assert!(Request::decode(&[T_RESET, 1, 2]).is_err());
        let mut extra = Request::Reset { session_id: 3 }.encode();
        extra.push(0);
        assert!(Request::decode(&extra).is_err());
        assert!(Response::decode(&[T_LOGITS, 0, 0]).is_err());
    }

    fn arb_entry() -> impl Strategy<Value = PredictEntry> {
        (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..64)).prop_map(
            |(session_id, new_symbols)| PredictEntry {
                session_id,
                new_symbols,
            },
        )
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        prop_oneof![
            (any::<String>(), any::<bool>(), any::<u64>(), any::<bool>()).prop_map(
                |(p, m, f, d)| {
                    Request::Init(InitRequest {
                        version: PROTOCOL_VERSION,
                        prompt_text: p,
                        ordering_mode: if m {
                            OrderingMode::ChannelJoint
                        } else {
                            OrderingMode::ChannelIndependent
                        },
                        map_fingerprint: f,
                        expects_deterministic: d,
                    })
                }
            ),
            arb_entry().prop_map(Request::Predict),
            any::<u64>().prop_map(|session_id| Request::Reset { session_id }),
            proptest::collection::vec(arb_entry(), 0..5).prop_map(Request::PredictBatch),
            arb_entry().prop_map(Request::PredictFull),
        ]
    }

    fn arb_response() -> impl Strategy<Value = Response> {
        let logits = proptest::collection::vec(-1e6f32..1e6, 256)
            .prop_map(|v| -> Logits { v.try_into().unwrap() });
        prop_oneof![
            (
                any::<u32>(),
                any::<u32>(),
                proptest::collection::vec(any::<u32>(), 256),
                any::<u64>(),
                any::<u32>()
            )
                .prop_map(|(v, w, ids, f, p)| Response::Init(InitResponse {
                    vocab_size: v,
                    context_window: w,
                    digital_token_ids: Box::new(ids.try_into().unwrap()),
                    model_fingerprint: f,
                    prompt_tokens: p,
                })),
            logits.clone().prop_map(|l| Response::Logits(Box::new(l))),
            Just(Response::ResetOk),
            proptest::collection::vec(logits, 0..3).prop_map(Response::LogitsBatch),
            proptest::collection::vec(-1e6f32..1e6, 0..600).prop_map(Response::LogitsFull),
            (1u8..=6, any::<String>()).prop_map(|(c, m)| Response::Error {
                code: ErrorCode::from_u8(c),
                message: m
            }),
        ]
    }

    proptest! {
        #[test]
        fn request_codec(req in arb_request()) {
            prop_assert_eq!(Request::decode(&req.encode()).unwrap(), req);
        }

        #[test]
        fn response_codec(resp in arb_response()) {
            prop_assert_eq!(Response::decode(&resp.encode()).unwrap(), resp);
        }
    }
}
