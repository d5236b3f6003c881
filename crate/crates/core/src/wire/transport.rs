use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::frame::MessageKind;
use super::frame::{decode_frame, encode_frame, read_frame_bytes, Frame, MAX_PAYLOAD};
use super::ledger::{BandwidthLedger, Direction, Traffic};
use crate::error::{Error, Result};

/// One direction of one node's session with the parameter server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Link {
    pub node: usize,
    pub direction: Direction,
}

impl Link {
    pub fn up(node: usize) -> Self {
        Link {
            node,
            direction: Direction::Up,
        }
    }

    pub fn down(node: usize) -> Self {
        Link {
            node,
            direction: Direction::Down,
        }
    }
}

/// Reliable, ordered delivery of encoded frames.
pub trait Transport: Send {
    fn send_raw(&mut self, link: Link, bytes: &[u8]) -> Result<()>;

    /// Next complete frame on `link`, as raw bytes.
    fn recv_raw(&mut self, link: Link) -> Result<Vec<u8>>;
}

/// In-process queues carrying the same framed bytes a socket would.
#[derive(Debug, Default)]
pub struct LoopbackTransport {
    queues: HashMap<Link, VecDeque<Vec<u8>>>,
}

impl LoopbackTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for LoopbackTransport {
    fn send_raw(&mut self, link: Link, bytes: &[u8]) -> Result<()> {
        self.queues.entry(link).or_default().push_back(bytes.to_vec());
        Ok(())
    }

    fn recv_raw(&mut self, link: Link) -> Result<Vec<u8>> {
        self.queues
            .get_mut(&link)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Transport(format!("no frame pending on {link:?}")))
    }
}

struct TcpSession {
    /// Node end: writes uplink frames.
    node_stream: TcpStream,
    /// Server end: writes downlink frames.
    server_stream: TcpStream,
    up_rx: Receiver<Result<Vec<u8>>>,
    down_rx: Receiver<Result<Vec<u8>>>,
}

/// Real TCP sockets on a configurable address, one connection per node.
///
/// Both ends live in this process: the server side accepts `nodes`
/// connections on the listener, each node announces its id with a 4-byte
/// handshake, and a reader thread per socket drains frames so writers never
/// block on full kernel buffers.
pub struct TcpTransport {
    sessions: Vec<TcpSession>,
    timeout: Duration,
}

fn spawn_reader(stream: TcpStream) -> Receiver<Result<Vec<u8>>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut stream = stream;
        loop {
            let frame = read_frame_bytes(&mut stream);
            let stop = frame.is_err();
            if tx.send(frame).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl TcpTransport {
    pub fn bind(addr: impl ToSocketAddrs, nodes: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let mut node_streams = Vec::with_capacity(nodes);
        let mut server_streams: Vec<Option<TcpStream>> = (0..nodes).map(|_| None).collect();
        for id in 0..nodes {
            let mut stream = TcpStream::connect(local)?;
            stream.set_nodelay(true)?;
            stream.write_all(&(id as u32).to_le_bytes())?;
            node_streams.push(stream);
        }
        for _ in 0..nodes {
            let (mut stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut id = [0u8; 4];
            std::io::Read::read_exact(&mut stream, &mut id)?;
            let id = u32::from_le_bytes(id) as usize;
            let slot = server_streams
                .get_mut(id)
                .ok_or_else(|| Error::Transport(format!("handshake from unknown node {id}")))?;
            *slot = Some(stream);
        }
        let mut sessions = Vec::with_capacity(nodes);
        for (node_stream, server_stream) in node_streams.into_iter().zip(server_streams) {
            let server_stream = server_stream.ok_or_else(|| Error::Transport("missing node connection".into()))?;
            let up_rx = spawn_reader(server_stream.try_clone()?);
            let down_rx = spawn_reader(node_stream.try_clone()?);
            sessions.push(TcpSession {
                node_stream,
                server_stream,
                up_rx,
                down_rx,
            });
        }
        Ok(TcpTransport {
            sessions,
            timeout: Duration::from_secs(60),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn session(&mut self, node: usize) -> Result<&mut TcpSession> {
        self.sessions
            .get_mut(node)
            .ok_or_else(|| Error::Transport(format!("no session for node {node}")))
    }
}

impl Transport for TcpTransport {
    fn send_raw(&mut self, link: Link, bytes: &[u8]) -> Result<()> {
        let session = self.session(link.node)?;
        let stream = match link.direction {
            Direction::Up => &mut session.node_stream,
            Direction::Down => &mut session.server_stream,
        };
        stream
            .write_all(bytes)
            .map_err(|e| Error::Transport(format!("send on {link:?} failed: {e}")))
    }

    fn recv_raw(&mut self, link: Link) -> Result<Vec<u8>> {
        let timeout = self.timeout;
        let session = self.session(link.node)?;
        let rx = match link.direction {
            Direction::Up => &session.up_rx,
            Direction::Down => &session.down_rx,
        };
        match rx.recv_timeout(timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport(format!("timed out waiting on {link:?}"))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport(format!("connection lost on {link:?}"))),
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in &self.sessions {
            let _ = s.node_stream.shutdown(std::net::Shutdown::Both);
            let _ = s.server_stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// A transport plus the ledger that charges every frame sent through it.
pub struct Channel {
    transport: Box<dyn Transport>,
    ledger: BandwidthLedger,
    include_headers: bool,
}

impl Channel {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Channel {
            transport,
            ledger: BandwidthLedger::new(),
            include_headers: false,
        }
    }

    pub fn loopback() -> Self {
        Channel::new(Box::new(LoopbackTransport::new()))
    }

    /// Charge whole frames (header, routing fields and body) instead of the
    /// body alone.
    pub fn with_headers(mut self, include: bool) -> Self {
        self.include_headers = include;
        self
    }

    pub fn send(&mut self, link: Link, frame: &Frame) -> Result<()> {
        if frame.payload_len() > MAX_PAYLOAD {
            return Err(Error::protocol(10, "frame exceeds maximum payload"));
        }
        let bytes = encode_frame(frame);
        self.transport.send_raw(link, &bytes)?;
        let charged = if self.include_headers {
            bytes.len()
        } else {
            frame.body_len()
        };
        let traffic = match frame.message.kind() {
            MessageKind::MaskUpload | MessageKind::GlobalMask => Traffic::Mask,
            _ => Traffic::Weights,
        };
        self.ledger
            .record(frame.round, link.node, link.direction, traffic, charged as u64 * 8);
        Ok(())
    }

    pub fn recv(&mut self, link: Link) -> Result<Frame> {
        let bytes = self.transport.recv_raw(link)?;
        decode_frame(&bytes)
    }

    pub fn ledger(&self) -> &BandwidthLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut BandwidthLedger {
        &mut self.ledger
    }
}
