//! Length-prefixed JSON over TCP.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. Records travel as upload lines.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::relay::{Direction, RecordTag, RelayEnvelope, SessionId};
use super::{unix_now, EdgeState, RelayPort, ServerError};
use crate::filter::UploadRecord;

pub const DEFAULT_PORT: u16 = 7340;
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    Upload {
        records: Vec<String>,
    },
    Download {
        since_epoch: u64,
    },
    Relay {
        session: String,
        direction: Direction,
        payload_b64: String,
        #[serde(default)]
        timestamp: u64,
    },
    OpenSession {
        tag: String,
    },
    Pending {
        tag: String,
    },
    Fetch {
        session: String,
        direction: Direction,
    },
    Publish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEnvelope {
    pub session: String,
    pub direction: Direction,
    pub payload_b64: String,
    pub timestamp: u64,
}

impl From<&RelayEnvelope> for WireEnvelope {
    fn from(e: &RelayEnvelope) -> Self {
        WireEnvelope {
            session: e.session_id.to_string(),
            direction: e.direction,
            payload_b64: B64.encode(&e.payload),
            timestamp: e.timestamp,
        }
    }
}

impl TryFrom<&WireEnvelope> for RelayEnvelope {
    type Error = ServerError;

    fn try_from(w: &WireEnvelope) -> Result<Self, Self::Error> {
        Ok(RelayEnvelope {
            session_id: w.session.parse()?,
            direction: w.direction,
            payload: decode_b64(&w.payload_b64)?,
            timestamp: w.timestamp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Response {
    Receipt { count: usize },
    Records { epoch: u64, records: Vec<String> },
    Delivered { count: usize },
    Session { session: String },
    Sessions { sessions: Vec<String> },
    Envelopes { envelopes: Vec<WireEnvelope> },
    Published { epoch: u64, records: usize },
    Error { message: String },
}

fn decode_b64(s: &str) -> Result<Vec<u8>, ServerError> {
    B64.decode(s)
        .map_err(|e| ServerError::MalformedPayload(format!("base64: {e}")))
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(serde_json::from_slice(&body)?))
}

pub fn handle(state: &EdgeState, req: Request) -> Response {
    match dispatch(state, req) {
        Ok(r) => r,
        Err(e) => Response::Error {
            message: e.to_string(),
        },
    }
}

fn dispatch(state: &EdgeState, req: Request) -> Result<Response, ServerError> {
    Ok(match req {
        Request::Upload { records } => {
            let parsed = records
                .iter()
                .map(|l| l.parse::<UploadRecord>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ServerError::MalformedPayload(e.to_string()))?;
            let receipt = state.upload(&parsed)?;
            Response::Receipt {
                count: receipt.count,
            }
        }
        Request::Download { since_epoch } => {
            let snap = state.snapshot();
            let records = snap.since(since_epoch)?;
            Response::Records {
                epoch: snap.epoch,
                records: records.iter().map(|r| r.upload_record().to_line()).collect(),
            }
        }
        Request::Relay {
            session,
            direction,
            payload_b64,
            timestamp,
        } => {
            let env = RelayEnvelope {
                session_id: session.parse()?,
                direction,
                payload: decode_b64(&payload_b64)?,
                timestamp,
            };
            Response::Delivered {
                count: state.relay_envelope(env)?,
            }
        }
        Request::OpenSession { tag } => Response::Session {
            session: state.open(tag.parse()?, unix_now()).to_string(),
        },
        Request::Pending { tag } => Response::Sessions {
            sessions: state
                .pending_for(&tag.parse()?)
                .iter()
                .map(|s| s.to_string())
                .collect(),
        },
        Request::Fetch { session, direction } => Response::Envelopes {
            envelopes: state
                .fetch_mail(&session.parse()?, direction)?
                .iter()
                .map(WireEnvelope::from)
                .collect(),
        },
        Request::Publish => {
            let snap = state.publish(unix_now());
            Response::Published {
                epoch: snap.epoch,
                records: snap.records.len(),
            }
        }
    })
}

fn serve_connection(state: Arc<EdgeState>, mut stream: TcpStream) -> io::Result<()> {
    loop {
        let req = match read_frame::<_, Request>(&mut stream) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let message = format!("bad request: {e}");
                write_frame(&mut stream, &Response::Error { message })?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_frame(&mut stream, &handle(&state, req))?;
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub epoch_seconds: u64,
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    publisher: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.publisher.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop();
        }
    }
}

/// Starts the accept loop and the periodic publisher on background threads.
pub fn spawn(state: Arc<EdgeState>, config: ServeConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(config.bind)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));

    let accept = {
        let state = Arc::clone(&state);
        let shutdown = Arc::clone(&shutdown);
        thread::spawn(move || {
            for conn in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let state = Arc::clone(&state);
                thread::spawn(move || {
                    let _ = serve_connection(state, stream);
                });
            }
        })
    };

    let publisher = {
        let shutdown = Arc::clone(&shutdown);
        let period = Duration::from_secs(config.epoch_seconds.max(1));
        thread::spawn(move || {
            let mut next = Instant::now() + period;
            while !shutdown.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(100));
                if Instant::now() >= next {
                    let now = unix_now();
                    state.publish(now);
                    state.expire_sessions(now.saturating_sub(86_400));
                    next += period;
                }
            }
        })
    };

    Ok(ServerHandle {
        addr,
        shutdown,
        accept: Some(accept),
        publisher: Some(publisher),
    })
}

/// Blocking client holding one connection.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client { stream })
    }

    pub fn call(&mut self, req: &Request) -> Result<Response, ServerError> {
        write_frame(&mut self.stream, req)?;
        let resp = read_frame(&mut self.stream)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))?;
        match resp {
            Response::Error { message } => Err(ServerError::Remote(message)),
            other => Ok(other),
        }
    }

    pub fn upload(&mut self, records: &[UploadRecord]) -> Result<usize, ServerError> {
        let req = Request::Upload {
            records: records.iter().map(UploadRecord::to_line).collect(),
        };
        match self.call(&req)? {
            Response::Receipt { count } => Ok(count),
            other => Err(unexpected(other)),
        }
    }

    pub fn download(&mut self, since_epoch: u64) -> Result<(u64, Vec<UploadRecord>), ServerError> {
        match self.call(&Request::Download { since_epoch })? {
            Response::Records { epoch, records } => {
                let parsed = records
                    .iter()
                    .map(|l| l.parse())
                    .collect::<Result<Vec<UploadRecord>, _>>()
                    .map_err(|e| ServerError::MalformedPayload(e.to_string()))?;
                Ok((epoch, parsed))
            }
            other => Err(unexpected(other)),
        }
    }

    pub fn publish(&mut self) -> Result<u64, ServerError> {
        match self.call(&Request::Publish)? {
            Response::Published { epoch, .. } => Ok(epoch),
            other => Err(unexpected(other)),
        }
    }
}

impl RelayPort for Client {
    fn open_session(&mut self, tag: RecordTag, _now: u64) -> Result<SessionId, ServerError> {
        match self.call(&Request::OpenSession {
            tag: tag.to_string(),
        })? {
            Response::Session { session } => session.parse(),
            other => Err(unexpected(other)),
        }
    }

    fn pending(&mut self, tag: &RecordTag) -> Result<Vec<SessionId>, ServerError> {
        match self.call(&Request::Pending {
            tag: tag.to_string(),
        })? {
            Response::Sessions { sessions } => sessions.iter().map(|s| s.parse()).collect(),
            other => Err(unexpected(other)),
        }
    }

    fn send(&mut self, envelope: RelayEnvelope) -> Result<usize, ServerError> {
        let w = WireEnvelope::from(&envelope);
        let req = Request::Relay {
            session: w.session,
            direction: w.direction,
            payload_b64: w.payload_b64,
            timestamp: w.timestamp,
        };
        match self.call(&req)? {
            Response::Delivered { count } => Ok(count),
            other => Err(unexpected(other)),
        }
    }

    fn fetch(
        &mut self,
        sid: &SessionId,
        direction: Direction,
    ) -> Result<Vec<RelayEnvelope>, ServerError> {
        match self.call(&Request::Fetch {
            session: sid.to_string(),
            direction,
        })? {
            Response::Envelopes { envelopes } => {
                envelopes.iter().map(RelayEnvelope::try_from).collect()
            }
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(r: Response) -> ServerError {
    ServerError::Remote(format!("unexpected response {r:?}"))
}
