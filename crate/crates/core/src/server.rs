//! TCP episode server. One thread per connection; each session wraps an
//! [`EpisodeSession`] so the sequential restriction is enforced server-side
//! by the same code that guards in-process learners.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::config::TaskConfig;
use crate::pack::DatasetPack;
use crate::protocol::{read_frame, write_frame, Body, Frame, FrameError, Layout, StoredKind, PROTOCOL_VERSION};
use crate::sampler::{sample_episode, SampleError};
use crate::session::{EntryKind, EpisodeSession, GuardError};

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    /// Sessions without traffic for this long are closed.
    pub idle_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            idle_timeout: Duration::from_secs(300),
        }
    }
}

struct Slot {
    owner: u64,
    last_seq: u64,
    last_seen: Instant,
    /// Dropped on expiry to release the episode.
    session: Option<EpisodeSession>,
}

/// Protocol state machine, independent of any socket.
pub struct EpisodeService {
    pack: Arc<DatasetPack>,
    config: TaskConfig,
    options: ServerOptions,
    next_episode: AtomicU64,
    next_connection: AtomicU64,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Slot>>>>,
}

impl EpisodeService {
    /// Fails if the first episode cannot be sampled from `pack`.
    pub fn new(pack: Arc<DatasetPack>, config: TaskConfig, options: ServerOptions) -> Result<Self, SampleError> {
        sample_episode(&pack, &config, 0)?;
        Ok(EpisodeService {
            pack,
            config,
            options,
            next_episode: AtomicU64::new(0),
            next_connection: AtomicU64::new(0),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// Identity for a new peer; sessions are only reachable from the peer
    /// that opened them.
    pub fn connect(&self) -> u64 {
        self.next_connection.fetch_add(1, Ordering::Relaxed)
    }

    /// Drops every session opened by `peer`.
    pub fn disconnect(&self, peer: u64) {
        let mut sessions = self.sessions.lock().unwrap();
        sessions.retain(|_, slot| slot.lock().unwrap().owner != peer);
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions
            .lock()
            .unwrap()
            .values()
            .filter(|s| s.lock().unwrap().session.is_some())
            .count()
    }

    fn sweep(&self, now: Instant) {
        let timeout = self.options.idle_timeout;
        let mut sessions = self.sessions.lock().unwrap();
        sessions.retain(|_, slot| {
            let mut slot = slot.lock().unwrap();
            let idle = now.saturating_duration_since(slot.last_seen);
            if idle > timeout {
                slot.session = None;
            }
            idle <= timeout * 2
        });
    }

    /// Answers one request from `peer`. The reply echoes the request `seq`.
    pub fn handle(&self, peer: u64, request: Frame) -> Frame {
        let seq = request.header.seq;
        let session_id = request.header.session_id;
        let reply = |body: Body| Frame::new(body, session_id, seq);
        match request.header.body {
            Body::Hello { version } => {
                if version != PROTOCOL_VERSION {
                    return reply(Body::error(
                        "unsupported_version",
                        format!("server speaks version {PROTOCOL_VERSION}, client sent {version}"),
                    ));
                }
                self.open_session(peer, seq)
            }
            Body::NextSupport { .. } | Body::StoreBytes { .. } | Body::GetTarget | Body::Predict { .. } => {
                let Some(id) = session_id else {
                    return reply(Body::error("unknown_session", "request carries no session_id"));
                };
                let slot = self.sessions.lock().unwrap().get(&id).cloned();
                let Some(slot) = slot else {
                    return reply(Body::error("unknown_session", format!("no session {id}")));
                };
                let mut slot = slot.lock().unwrap();
                if slot.owner != peer {
                    return reply(Body::error("unknown_session", format!("no session {id}")));
                }
                if seq <= slot.last_seq {
                    return reply(Body::error(
                        "stale_seq",
                        format!("seq {seq} does not exceed {}", slot.last_seq),
                    ));
                }
                slot.last_seq = seq;
                let now = Instant::now();
                if now.saturating_duration_since(slot.last_seen) > self.options.idle_timeout {
                    slot.session = None;
                }
                slot.last_seen = now;
                let Some(session) = slot.session.as_mut() else {
                    return reply(Body::error(GuardError::SessionClosed.code(), "session expired"));
                };
                let mut frame = match dispatch(session, request.header.body) {
                    Ok(frame) => frame,
                    Err(e) => Frame::new(Body::error(e.code(), e.to_string()), None, 0),
                };
                frame.header.session_id = session_id;
                frame.header.seq = seq;
                frame
            }
            other => reply(Body::error(
                "unexpected_type",
                format!("{} is a server message", type_name(&other)),
            )),
        }
    }

    fn open_session(&self, peer: u64, seq: u64) -> Frame {
        let now = Instant::now();
        self.sweep(now);
        let index = self.next_episode.fetch_add(1, Ordering::Relaxed);
        let episode = match sample_episode(&self.pack, &self.config, index) {
            Ok(e) => e,
            Err(e) => return Frame::new(Body::error("sampling_failed", e.to_string()), None, seq),
        };
        let (height, width, channels) = self.pack.geometry();
        let slot = Slot {
            owner: peer,
            last_seq: seq,
            last_seen: now,
            session: Some(EpisodeSession::new(self.pack.clone(), episode)),
        };
        self.sessions.lock().unwrap().insert(index, Arc::new(Mutex::new(slot)));
        Frame::new(
            Body::Session {
                version: PROTOCOL_VERSION,
                config: self.config,
                height,
                width,
                channels,
                episode_index: index,
            },
            Some(index),
            seq,
        )
    }
}

fn type_name(body: &Body) -> String {
    serde_json::to_value(body)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn image_layout(session: &EpisodeSession, count: usize, len: usize) -> Layout {
    let (height, width, channels) = session.pack().geometry();
    Layout {
        len: len as u64,
        height,
        width,
        channels,
        count: count as u32,
    }
}

fn dispatch(session: &mut EpisodeSession, body: Body) -> Result<Frame, GuardError> {
    let frame = |body| Frame::new(body, None, 0);
    match body {
        Body::NextSupport { index } => {
            let position = index.unwrap_or(session.cursor() + 1);
            let view = session.support_at(position)?;
            let (position, labels, count) = (view.position, view.labels.clone(), view.inputs.len());
            let payload = view.to_contiguous();
            let layout = image_layout(session, count, payload.len());
            Ok(frame(Body::Support { position, labels }).with_payload(layout, payload))
        }
        Body::StoreBytes { tag, n, element_width, kind } => {
            let kind = match kind {
                StoredKind::Representation => EntryKind::Representation,
                StoredKind::Label => EntryKind::Label,
            };
            session.store_reported(tag, n, element_width, kind)?;
            Ok(frame(Body::Ack {
                bank_bytes: session.bank().total_bytes(),
                peak_representation_bytes: session.bank().peak_representation_bytes(),
            }))
        }
        Body::GetTarget => {
            let view = session.request_target()?;
            let count = view.inputs.len();
            let payload = view.to_contiguous();
            let layout = image_layout(session, count, payload.len());
            Ok(frame(Body::Target { count: count as u32 }).with_payload(layout, payload))
        }
        Body::Predict { labels } => {
            let score = session.submit_predictions(&labels)?;
            Ok(frame(Body::Score {
                accuracy: score.accuracy,
                correct: score.correct as u64,
                total: score.total as u64,
                atm: score.atm.atm,
                memory_bytes: score.atm.memory_bytes,
                episode_index: score.episode_index,
            }))
        }
        _ => unreachable!("only session requests are dispatched"),
    }
}

fn serve_connection(service: &EpisodeService, stream: TcpStream) -> io::Result<()> {
    let peer = service.connect();
    stream.set_read_timeout(Some(service.options.idle_timeout))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let result = loop {
        let reply = match read_frame(&mut reader) {
            Ok(request) => service.handle(peer, request),
            Err(FrameError::UnknownType { kind, session_id, seq }) => Frame::new(
                Body::error("unknown_type", format!("unknown message type `{kind}`")),
                session_id,
                seq,
            ),
            // malformed input, idle socket or peer gone: drop the connection
            Err(FrameError::Closed) => break Ok(()),
            Err(FrameError::Malformed(_)) => break Ok(()),
            Err(FrameError::Io(e)) => break Err(e),
        };
        if let Err(e) = write_frame(&mut writer, &reply) {
            break Err(e);
        }
    };
    service.disconnect(peer);
    let _ = writer.get_ref().shutdown(std::net::Shutdown::Both);
    result
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections end on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `addr` and serves on a background thread.
pub fn spawn(service: Arc<EpisodeService>, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let service = service.clone();
            std::thread::spawn(move || {
                let _ = serve_connection(&service, stream);
            });
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}
