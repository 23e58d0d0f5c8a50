//! Client side of the remote provider protocol.
//!
//! The server's INIT binds one prompt to a connection, so the client keeps one
//! connection per (prompt text, ordering mode). Per-channel prompts under
//! channel-independent coding therefore use three connections.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use log::debug;

use super::wire::{
    read_frame, write_frame, InitRequest, InitResponse, PredictEntry, Request, Response,
    PROTOCOL_VERSION,
};
use super::{gather_logits, softmax256, Pmf256, ProbabilityProvider, ProviderSession};
use crate::error::{Error, Result};
use crate::image::OrderingMode;
use crate::token::{DigitalTokenMap, PromptConfig};

/// Where a logits server lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port` of a stream socket.
    Tcp(String),
    /// Shell command whose stdin/stdout carry the protocol.
    Command(String),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "{addr}"),
            Endpoint::Command(cmd) => write!(f, "stdio:{cmd}"),
        }
    }
}

struct Transport {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Transport {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| {
                    Error::ProviderUnavailable(format!("cannot connect to {addr}: {e}"))
                })?;
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                Ok(Self {
                    reader: Box::new(BufReader::new(reader)),
                    writer: Box::new(BufWriter::new(stream)),
                    child: None,
                })
            }
            Endpoint::Command(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| {
                        Error::ProviderUnavailable(format!("cannot start `{cmd}`: {e}"))
                    })?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(BufWriter::new(stdin)),
                    child: Some(child),
                })
            }
        }
    }

    fn call(&mut self, request: &Request) -> Result<Response> {
        write_frame(&mut self.writer, &request.encode())
            .map_err(|e| Error::ProviderUnavailable(format!("send failed: {e}")))?;
        let payload = read_frame(&mut self.reader)?
            .ok_or_else(|| Error::ProviderUnavailable("server closed the connection".into()))?;
        match Response::decode(&payload)? {
            Response::Error { code, message } => Err(code.into_error(message)),
            other => Ok(other),
        }
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct Connection {
    transport: Mutex<Transport>,
    prompt_tokens: usize,
}

impl Connection {
    fn call(&self, request: &Request) -> Result<Response> {
        let mut transport = self
            .transport
            .lock()
            .map_err(|_| Error::ProviderUnavailable("connection poisoned".into()))?;
        transport.call(request)
    }

    fn reset(&self, session_id: u64) -> Result<()> {
        match self.call(&Request::Reset { session_id })? {
            Response::ResetOk => Ok(()),
            other => Err(unexpected("RESET_OK", &other)),
        }
    }
}

fn unexpected(wanted: &str, got: &Response) -> Error {
    let kind = match got {
        Response::Init(_) => "INIT_OK",
        Response::Logits(_) => "LOGITS",
        Response::ResetOk => "RESET_OK",
        Response::LogitsBatch(_) => "LOGITS_BATCH",
        Response::LogitsFull(_) => "LOGITS_FULL",
        Response::Error { .. } => "ERROR",
    };
    Error::CorruptProviderOutput(format!("expected {wanted}, server sent {kind}"))
}

fn logits_to_pmf(logits: &[f32; 256]) -> Result<Pmf256> {
    softmax256(&logits.map(f64::from))
}

/// Provider backed by a logits server.
pub struct RemoteProvider {
    endpoint: Endpoint,
    deterministic: bool,
    info: InitResponse,
    map: DigitalTokenMap,
    connections: Mutex<HashMap<(String, OrderingMode), Arc<Connection>>>,
    next_session: Arc<AtomicU64>,
}

impl fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("endpoint", &self.endpoint)
            .field("model_fingerprint", &self.info.model_fingerprint)
            .finish_non_exhaustive()
    }
}

impl RemoteProvider {
    /// Handshakes with the server, validates its digital token map and checks
    /// its gather against a full-vocabulary reply.
    pub fn connect(endpoint: Endpoint, expects_deterministic: bool) -> Result<Self> {
        let (info, conn) = Self::open(
            &endpoint,
            "",
            OrderingMode::ChannelJoint,
            0,
            expects_deterministic,
        )?;
        if info.vocab_size == 0 {
            return Err(Error::CorruptProviderOutput(
                "server reports an empty vocabulary".into(),
            ));
        }
        if let Some(z) = info
            .digital_token_ids
            .iter()
            .position(|&id| id >= info.vocab_size)
        {
            return Err(Error::CorruptProviderOutput(format!(
                "token id {} for value {z} is outside the vocabulary of {}",
                info.digital_token_ids[z], info.vocab_size
            )));
        }
        let map = DigitalTokenMap::from_ids(*info.digital_token_ids)?;
        debug!(
            "connected to {endpoint}: vocab {} window {} model {:016x}",
            info.vocab_size, info.context_window, info.model_fingerprint
        );
        let provider = Self {
            endpoint,
            deterministic: expects_deterministic,
            info,
            map,
            connections: Mutex::new(HashMap::new()),
            next_session: Arc::new(AtomicU64::new(1)),
        };
        if expects_deterministic {
            provider.verify_gather(&conn)?;
        }
        provider
            .connections
            .lock()
            .unwrap()
            .insert((String::new(), OrderingMode::ChannelJoint), conn);
        Ok(provider)
    }

    fn open(
        endpoint: &Endpoint,
        prompt: &str,
        mode: OrderingMode,
        map_fingerprint: u64,
        expects_deterministic: bool,
    ) -> Result<(InitResponse, Arc<Connection>)> {
        let mut transport = Transport::open(endpoint)?;
        let request = Request::Init(InitRequest {
            version: PROTOCOL_VERSION,
            prompt_text: prompt.to_string(),
            ordering_mode: mode,
            map_fingerprint,
            expects_deterministic,
        });
        let info = match transport.call(&request)? {
            Response::Init(info) => info,
            other => return Err(unexpected("INIT_OK", &other)),
        };
        let conn = Arc::new(Connection {
            transport: Mutex::new(transport),
            prompt_tokens: info.prompt_tokens as usize,
        });
        Ok((info, conn))
    }

    /// Compares the server's gathered logits with a client-side gather of the
    /// full vocabulary on an empty context.
    fn verify_gather(&self, conn: &Connection) -> Result<()> {
        let id = self.fresh_session_id();
        conn.reset(id)?;
        let full = match conn.call(&Request::PredictFull(PredictEntry {
            session_id: id,
            new_symbols: Vec::new(),
        }))? {
            Response::LogitsFull(v) => v,
            other => return Err(unexpected("LOGITS_FULL", &other)),
        };
        if full.len() != self.info.vocab_size as usize {
            return Err(Error::CorruptProviderOutput(format!(
                "full reply has {} logits, vocabulary is {}",
                full.len(),
                self.info.vocab_size
            )));
        }
        conn.reset(id)?;
        let gathered = match conn.call(&Request::Predict(PredictEntry {
            session_id: id,
            new_symbols: Vec::new(),
        }))? {
            Response::Logits(l) => l,
            other => return Err(unexpected("LOGITS", &other)),
        };
        let local = gather_logits(&full, &self.map)?;
        if local
            .iter()
            .zip(gathered.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::CorruptProviderOutput(
                "server-side gather disagrees with the full-vocabulary logits".into(),
            ));
        }
        Ok(())
    }

    fn fresh_session_id(&self) -> u64 {
        self.next_session.fetch_add(1, Ordering::Relaxed)
    }

    fn connection(&self, prompt: &str, mode: OrderingMode) -> Result<Arc<Connection>> {
        let key = (prompt.to_string(), mode);
        let mut conns = self
            .connections
            .lock()
            .map_err(|_| Error::ProviderUnavailable("connection table poisoned".into()))?;
        if let Some(conn) = conns.get(&key) {
            return Ok(conn.clone());
        }
        let (info, conn) = Self::open(
            &self.endpoint,
            prompt,
            mode,
            self.map.fingerprint(),
            self.deterministic,
        )?;
        if info.model_fingerprint != self.info.model_fingerprint
            || info.digital_token_ids != self.info.digital_token_ids
        {
            return Err(Error::WrongProvider(format!(
                "{} changed model or vocabulary between connections",
                self.endpoint
            )));
        }
        conns.insert(key, conn.clone());
        Ok(conn)
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn vocab_size(&self) -> u32 {
        self.info.vocab_size
    }

    /// Starts a session, keeping the concrete type for batched prediction.
    pub fn begin_remote(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<RemoteSession> {
        let conn = self.connection(&prompt.effective_text(channel), mode)?;
        let id = self.fresh_session_id();
        conn.reset(id)?;
        Ok(RemoteSession {
            prompt_len: conn.prompt_tokens,
            conn,
            ids: self.next_session.clone(),
            id,
            pending: Vec::new(),
            history: Vec::new(),
            window: self.context_window(),
        })
    }

    /// Next-symbol PMFs for several sessions sharing one connection, in a
    /// single PREDICT_BATCH round trip.
    pub fn next_pmfs(&self, sessions: &mut [&mut RemoteSession]) -> Result<Vec<Pmf256>> {
        let Some(first) = sessions.first() else {
            return Ok(Vec::new());
        };
        let conn = first.conn.clone();
        if sessions.iter().any(|s| !Arc::ptr_eq(&s.conn, &conn)) {
            return Err(Error::Config(
                "batched sessions must share a prompt and ordering mode".into(),
            ));
        }
        for s in sessions.iter() {
            s.check_window()?;
        }
        let entries = sessions
            .iter_mut()
            .map(|s| PredictEntry {
                session_id: s.id,
                new_symbols: std::mem::take(&mut s.pending),
            })
            .collect::<Vec<_>>();
        let n = entries.len();
        match conn.call(&Request::PredictBatch(entries))? {
            Response::LogitsBatch(all) if all.len() == n => all.iter().map(logits_to_pmf).collect(),
            Response::LogitsBatch(all) => Err(Error::CorruptProviderOutput(format!(
                "batch of {n} answered with {} logit vectors",
                all.len()
            ))),
            other => Err(unexpected("LOGITS_BATCH", &other)),
        }
    }
}

impl ProbabilityProvider for RemoteProvider {
    fn name(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn fingerprint(&self) -> u64 {
        self.info.model_fingerprint
    }

    fn token_map(&self) -> &DigitalTokenMap {
        &self.map
    }

    fn context_window(&self) -> usize {
        self.info.context_window as usize
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn prompt_tokens(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<usize> {
        Ok(self
            .connection(&prompt.effective_text(channel), mode)?
            .prompt_tokens)
    }

    fn begin(
        &self,
        prompt: &PromptConfig,
        mode: OrderingMode,
        channel: Option<u8>,
    ) -> Result<Box<dyn ProviderSession>> {
        Ok(Box::new(self.begin_remote(prompt, mode, channel)?))
    }
}

/// Session state mirrored on the server. Only symbols not yet sent travel
/// with the next PREDICT.
pub struct RemoteSession {
    conn: Arc<Connection>,
    ids: Arc<AtomicU64>,
    id: u64,
    pending: Vec<u8>,
    history: Vec<u8>,
    prompt_len: usize,
    window: usize,
}

impl RemoteSession {
    fn check_window(&self) -> Result<()> {
        let needed = self.prompt_len + self.history.len() + 1;
        if needed > self.window {
            return Err(Error::ContextOverflow {
                needed,
                window: self.window,
            });
        }
        Ok(())
    }

    pub fn session_id(&self) -> u64 {
        self.id
    }

    pub fn history(&self) -> &[u8] {
        &self.history
    }
}

impl ProviderSession for RemoteSession {
    fn next_pmf(&mut self) -> Result<Pmf256> {
        self.check_window()?;
        let request = Request::Predict(PredictEntry {
            session_id: self.id,
            new_symbols: std::mem::take(&mut self.pending),
        });
        match self.conn.call(&request) {
            Ok(Response::Logits(l)) => logits_to_pmf(&l),
            Ok(other) => Err(unexpected("LOGITS", &other)),
            Err(Error::ContextOverflow { .. }) => Err(Error::ContextOverflow {
                needed: self.prompt_len + self.history.len() + 1,
                window: self.window,
            }),
            Err(e) => Err(e),
        }
    }

    fn observe(&mut self, symbol: u8) {
        self.pending.push(symbol);
        self.history.push(symbol);
    }

    fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    fn context_len(&self) -> usize {
        self.history.len()
    }

    /// Opens a new server session and replays the whole history into it.
    fn fork(&self) -> Result<Box<dyn ProviderSession>> {
        let id = self.ids.fetch_add(1, Ordering::Relaxed);
        self.conn.reset(id)?;
        Ok(Box::new(RemoteSession {
            conn: self.conn.clone(),
            ids: self.ids.clone(),
            id,
            pending: self.history.clone(),
            history: self.history.clone(),
            prompt_len: self.prompt_len,
            window: self.window,
        }))
    }
}

impl fmt::Debug for RemoteSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteSession")
            .field("id", &self.id)
            .field("context_len", &self.history.len())
            .finish()
    }
}
