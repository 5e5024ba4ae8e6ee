//! Blocking client for the episode server.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use crate::config::TaskConfig;
use crate::protocol::{read_frame, write_frame, Body, Frame, FrameError, Layout, StoredKind, PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    /// The server answered with an ERROR message.
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("unexpected reply: {0:?}")]
    Unexpected(Box<Body>),
    #[error("no session open")]
    NoSession,
}

impl ClientError {
    /// Wire code for server-side errors.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Server { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub session_id: u64,
    pub config: TaskConfig,
    pub geometry: (u32, u32, u32),
    pub episode_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSupport {
    pub position: u32,
    pub labels: Vec<u32>,
    pub layout: Layout,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteScore {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub atm: f64,
    pub memory_bytes: u64,
    pub episode_index: u64,
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    session: Option<u64>,
    seq: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            session: None,
            seq: 0,
        })
    }

    pub fn session_id(&self) -> Option<u64> {
        self.session
    }

    /// Sends a frame as is and returns the raw reply.
    pub fn exchange(&mut self, frame: &Frame) -> Result<Frame, ClientError> {
        write_frame(&mut self.writer, frame)?;
        Ok(read_frame(&mut self.reader)?)
    }

    /// Writes arbitrary bytes, for probing malformed input handling.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        use std::io::Write;
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read_reply(&mut self) -> Result<Frame, ClientError> {
        Ok(read_frame(&mut self.reader)?)
    }

    fn request(&mut self, body: Body) -> Result<Frame, ClientError> {
        self.seq += 1;
        let reply = self.exchange(&Frame::new(body, self.session, self.seq))?;
        match reply.header.body {
            Body::Error { code, message } => Err(ClientError::Server { code, message }),
            _ => Ok(reply),
        }
    }

    /// Opens a new session (one episode) on this connection.
    pub fn hello(&mut self) -> Result<SessionInfo, ClientError> {
        self.hello_with_version(PROTOCOL_VERSION)
    }

    pub fn hello_with_version(&mut self, version: u32) -> Result<SessionInfo, ClientError> {
        self.session = None;
        let reply = self.request(Body::Hello { version })?;
        match reply.header.body {
            Body::Session {
                config,
                height,
                width,
                channels,
                episode_index,
                ..
            } => {
                let session_id = reply.header.session_id.ok_or(ClientError::NoSession)?;
                self.session = Some(session_id);
                Ok(SessionInfo {
                    session_id,
                    config,
                    geometry: (height, width, channels),
                    episode_index,
                })
            }
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub fn next_support(&mut self) -> Result<RemoteSupport, ClientError> {
        self.support_at(None)
    }

    /// Asks for a specific 1-based support set position.
    pub fn support_at(&mut self, index: Option<u32>) -> Result<RemoteSupport, ClientError> {
        let reply = self.request(Body::NextSupport { index })?;
        match (reply.header.body, reply.header.layout) {
            (Body::Support { position, labels }, Some(layout)) => Ok(RemoteSupport {
                position,
                labels,
                layout,
                pixels: reply.payload,
            }),
            (other, _) => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    /// Reports `n` bytes kept client-side. Returns the peak representation
    /// footprint the server has on record.
    pub fn store_bytes(&mut self, tag: &str, n: u64, element_width: u32, kind: StoredKind) -> Result<u64, ClientError> {
        let reply = self.request(Body::StoreBytes {
            tag: tag.to_string(),
            n,
            element_width,
            kind,
        })?;
        match reply.header.body {
            Body::Ack {
                peak_representation_bytes,
                ..
            } => Ok(peak_representation_bytes),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub fn get_target(&mut self) -> Result<(Layout, Vec<u8>), ClientError> {
        let reply = self.request(Body::GetTarget)?;
        match (reply.header.body, reply.header.layout) {
            (Body::Target { .. }, Some(layout)) => Ok((layout, reply.payload)),
            (other, _) => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub fn predict(&mut self, labels: &[u32]) -> Result<RemoteScore, ClientError> {
        let reply = self.request(Body::Predict { labels: labels.to_vec() })?;
        match reply.header.body {
            Body::Score {
                accuracy,
                correct,
                total,
                atm,
                memory_bytes,
                episode_index,
            } => Ok(RemoteScore {
                accuracy,
                correct,
                total,
                atm,
                memory_bytes,
                episode_index,
            }),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }
}
