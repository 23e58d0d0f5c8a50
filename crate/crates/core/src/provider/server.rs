//! Reference implementation of the serving side of the wire protocol.
//!
//! A [`LogitBackend`] produces full-vocabulary logits; [`serve_connection`]
//! handles framing, session bookkeeping and the server-side gather. The
//! [`BuiltinBackend`] wraps the adaptive counting model behind a synthetic
//! vocabulary and is used for protocol tests and as a stand-in server.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use log::{debug, warn};

use super::builtin::AdaptiveSession;
use super::wire::{
    read_frame, write_frame, ErrorCode, InitRequest, InitResponse, Logits, PredictEntry, Request,
    Response, PROTOCOL_VERSION,
};
use super::{gather_logits, AdaptiveModel};
use crate::error::Result;
use crate::token::{fingerprint64, word_tokenize, DigitalTokenMap};

/// Error reported back to the client in an ERROR frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServeError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type ServeResult<T> = std::result::Result<T, ServeError>;

/// A model able to answer INIT.
pub trait LogitBackend: Send + Sync {
    fn init(&self, request: &InitRequest) -> ServeResult<Box<dyn BackendConnection>>;
}

/// Per-connection model state: one installed prompt, many sessions.
pub trait BackendConnection: Send {
    fn info(&self) -> InitResponse;

    /// Clears or creates a session.
    fn reset(&mut self, session_id: u64);

    /// Appends symbols to a session's context.
    fn extend(&mut self, session_id: u64, symbols: &[u8]) -> ServeResult<()>;

    /// Logits over the whole vocabulary for the session's next token.
    fn full_logits(&mut self, session_id: u64) -> ServeResult<Vec<f32>>;
}

fn gathered(
    conn: &mut dyn BackendConnection,
    map: &DigitalTokenMap,
    entry: &PredictEntry,
) -> ServeResult<Logits> {
    conn.extend(entry.session_id, &entry.new_symbols)?;
    let full = conn.full_logits(entry.session_id)?;
    gather_logits(&full, map).map_err(|e| ServeError::new(ErrorCode::Unavailable, e.to_string()))
}

fn handle(
    backend: &dyn LogitBackend,
    state: &mut Option<(Box<dyn BackendConnection>, DigitalTokenMap)>,
    request: Request,
) -> ServeResult<Response> {
    if let Request::Init(init) = &request {
        if init.version != PROTOCOL_VERSION {
            return Err(ServeError::new(
                ErrorCode::BadRequest,
                format!("protocol version {} unsupported", init.version),
            ));
        }
        let conn = backend.init(init)?;
        let info = conn.info();
        let map = DigitalTokenMap::from_ids(*info.digital_token_ids)
            .map_err(|e| ServeError::new(ErrorCode::TokenizerUnsuitable, e.to_string()))?;
        if init.map_fingerprint != 0 && init.map_fingerprint != map.fingerprint() {
            return Err(ServeError::new(
                ErrorCode::WrongMap,
                "client expects a different digital token map",
            ));
        }
        *state = Some((conn, map));
        return Ok(Response::Init(info));
    }
    let Some((conn, map)) = state.as_mut() else {
        return Err(ServeError::new(
            ErrorCode::BadRequest,
            "INIT must come first",
        ));
    };
    match request {
        Request::Init(_) => unreachable!(),
        Request::Reset { session_id } => {
            conn.reset(session_id);
            Ok(Response::ResetOk)
        }
        Request::Predict(entry) => Ok(Response::Logits(Box::new(gathered(
            conn.as_mut(),
            map,
            &entry,
        )?))),
        Request::PredictBatch(entries) => Ok(Response::LogitsBatch(
            entries
                .iter()
                .map(|e| gathered(conn.as_mut(), map, e))
                .collect::<ServeResult<_>>()?,
        )),
        Request::PredictFull(entry) => {
            conn.extend(entry.session_id, &entry.new_symbols)?;
            Ok(Response::LogitsFull(conn.full_logits(entry.session_id)?))
        }
    }
}

/// Serves one client until it disconnects.
pub fn serve_connection<R: Read, W: Write>(
    backend: &dyn LogitBackend,
    reader: R,
    writer: W,
) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut state = None;
    while let Some(payload) = read_frame(&mut reader)? {
        let response = match Request::decode(&payload) {
            Ok(request) => handle(backend, &mut state, request),
            Err(e) => Err(ServeError::new(ErrorCode::BadRequest, e.to_string())),
        };
        let response = response.unwrap_or_else(|e| {
            debug!("request failed: {}", e.message);
            Response::Error {
                code: e.code,
                message: e.message,
            }
        });
        write_frame(&mut writer, &response.encode())?;
    }
    Ok(())
}

/// Accepts clients forever, one thread each.
pub fn serve_tcp(listener: TcpListener, backend: Arc<dyn LogitBackend>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let backend = backend.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(r) => r,
                Err(e) => return warn!("cannot clone client socket: {e}"),
            };
            if let Err(e) = serve_connection(backend.as_ref(), reader, stream) {
                warn!("client connection ended with error: {e}");
            }
        });
    }
    Ok(())
}

/// Serves a single client over stdin/stdout.
pub fn serve_stdio(backend: &dyn LogitBackend) -> Result<()> {
    serve_connection(backend, std::io::stdin().lock(), std::io::stdout().lock())
}

/// The adaptive counting model exposed through a synthetic vocabulary.
///
/// Digital token for value `z` is `offset + z * stride`; every other
/// vocabulary entry gets a large logit, which a correct gather ignores.
#[derive(Debug, Clone)]
pub struct BuiltinBackend {
    pub model: AdaptiveModel,
    pub vocab_size: u32,
    pub offset: u32,
    pub stride: u32,
    pub context_window: u32,
    /// When false, INIT requests that demand determinism are refused.
    pub deterministic: bool,
}

/// Logit given to non-digital vocabulary entries.
pub const DISTRACTOR_LOGIT: f32 = 40.0;

impl BuiltinBackend {
    pub fn new(model: AdaptiveModel) -> Self {
        Self {
            model,
            vocab_size: 1024,
            offset: 300,
            stride: 2,
            context_window: 4096,
            deterministic: true,
        }
    }

    fn token_ids(&self) -> [u32; 256] {
        std::array::from_fn(|z| self.offset + z as u32 * self.stride)
    }

    fn fingerprint(&self) -> u64 {
        use super::ProbabilityProvider;
        let id = format!(
            "builtin-backend/1 model={:016x} vocab={} offset={} stride={}",
            self.model.fingerprint(),
            self.vocab_size,
            self.offset,
            self.stride
        );
        fingerprint64(id.as_bytes())
    }
}

impl LogitBackend for BuiltinBackend {
    fn init(&self, request: &InitRequest) -> ServeResult<Box<dyn BackendConnection>> {
        if request.expects_deterministic && !self.deterministic {
            return Err(ServeError::new(
                ErrorCode::Nondeterministic,
                "backend cannot guarantee deterministic logits",
            ));
        }
        let ids = self.token_ids();
        if let Some(z) = ids.iter().position(|&id| id >= self.vocab_size) {
            return Err(ServeError::new(
                ErrorCode::TokenizerUnsuitable,
                format!(
                    "value {z} has no single token in a vocabulary of {}",
                    self.vocab_size
                ),
            ));
        }
        DigitalTokenMap::from_ids(ids)
            .map_err(|e| ServeError::new(ErrorCode::TokenizerUnsuitable, e.to_string()))?;
        let prompt_tokens = word_tokenize(&request.prompt_text).len() as u32;
        if prompt_tokens >= self.context_window {
            return Err(ServeError::new(
                ErrorCode::ContextOverflow,
                format!("prompt of {prompt_tokens} tokens fills the window"),
            ));
        }
        Ok(Box::new(BuiltinConnection {
            backend: self.clone(),
            info: InitResponse {
                vocab_size: self.vocab_size,
                context_window: self.context_window,
                digital_token_ids: Box::new(ids),
                model_fingerprint: self.fingerprint(),
                prompt_tokens,
            },
            sessions: HashMap::new(),
        }))
    }
}

struct BuiltinConnection {
    backend: BuiltinBackend,
    info: InitResponse,
    sessions: HashMap<u64, AdaptiveSession>,
}

impl BackendConnection for BuiltinConnection {
    fn info(&self) -> InitResponse {
        self.info.clone()
    }

    fn reset(&mut self, session_id: u64) {
        self.sessions
            .insert(session_id, self.backend.model.session());
    }

    fn extend(&mut self, session_id: u64, symbols: &[u8]) -> ServeResult<()> {
        let session = self.sessions.get_mut(&session_id).ok_or_else(|| {
            ServeError::new(
                ErrorCode::BadRequest,
                format!("unknown session {session_id}"),
            )
        })?;
        for &s in symbols {
            session.update(s);
        }
        Ok(())
    }

    fn full_logits(&mut self, session_id: u64) -> ServeResult<Vec<f32>> {
        let session = self.sessions.get(&session_id).ok_or_else(|| {
            ServeError::new(
                ErrorCode::BadRequest,
                format!("unknown session {session_id}"),
            )
        })?;
        let needed = self.info.prompt_tokens as usize + session.history().len() + 1;
        if needed > self.info.context_window as usize {
            return Err(ServeError::new(
                ErrorCode::ContextOverflow,
                format!(
                    "{needed} tokens exceed the window of {}",
                    self.info.context_window
                ),
            ));
        }
        let mut logits = vec![DISTRACTOR_LOGIT; self.info.vocab_size as usize];
        let pmf = session.pmf();
        for (z, &id) in self.info.digital_token_ids.iter().enumerate() {
            logits[id as usize] = pmf.probabilities()[z].ln() as f32;
        }
        Ok(logits)
    }
}
