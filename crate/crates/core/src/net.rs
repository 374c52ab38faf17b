//! Socket transport for live mode. Servers exchange the same messages as in
//! the simulator, framed as a 4-byte big-endian length followed by the
//! canonical encoding of `(sender, message)`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientOp, Step};
use crate::codec::{canonical_encode, Decode, DecodeError};
use crate::crypto::ServerId;
use crate::message::Message;
use crate::service::{Outbox, Service};

/// Frames larger than this are refused.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame: {0}")]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("directory: {0}")]
    Directory(String),
    #[error("no reply before the deadline")]
    TimedOut,
}

pub fn write_frame(w: &mut impl Write, from: ServerId, msg: &Message) -> io::Result<()> {
    let body = canonical_encode(&(from, msg));
    let len = u32::try_from(body.len()).map_err(|_| io::Error::other("frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(ServerId, Message)>, NetError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(NetError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(<(ServerId, Message)>::decode(&body)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub id: ServerId,
    pub addr: String,
}

/// Where every server listens, keyed by display name. Stored as JSON.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directory {
    pub servers: BTreeMap<String, DirectoryEntry>,
}

impl Directory {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NetError::Directory(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| NetError::Directory(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn insert(&mut self, name: &str, id: ServerId, addr: SocketAddr) {
        self.servers.insert(
            name.to_string(),
            DirectoryEntry {
                id,
                addr: addr.to_string(),
            },
        );
    }

    pub fn addr_of(&self, id: &ServerId) -> Option<&str> {
        self.servers
            .values()
            .find(|e| e.id == *id)
            .map(|e| e.addr.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<ServerId> {
        self.servers.get(name).map(|e| e.id)
    }
}

/// Outgoing connections, shared between a node's loop and its readers.
/// Peers that dialled in are answered on their own connection.
#[derive(Clone)]
struct Links {
    me: ServerId,
    directory: Arc<Directory>,
    streams: Arc<Mutex<BTreeMap<ServerId, TcpStream>>>,
}

impl Links {
    fn adopt(&self, peer: ServerId, stream: &TcpStream) {
        if let Ok(clone) = stream.try_clone() {
            self.streams
                .lock()
                .expect("links lock")
                .entry(peer)
                .or_insert(clone);
        }
    }

    fn send(&self, to: ServerId, msg: &Message, inbox: &Sender<(ServerId, Message)>) {
        let mut streams = self.streams.lock().expect("links lock");
        if let Some(s) = streams.get_mut(&to) {
            if write_frame(s, self.me, msg).is_ok() {
                return;
            }
            streams.remove(&to);
        }
        let Some(addr) = self.directory.addr_of(&to) else {
            return;
        };
        let Ok(stream) = connect(addr) else { return };
        let Ok(mut writer) = stream.try_clone() else {
            return;
        };
        if write_frame(&mut writer, self.me, msg).is_ok() {
            streams.insert(to, writer);
            spawn_reader(stream, inbox.clone(), None);
        }
    }
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let addr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "unresolvable address"))?;
    let s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Forwards frames from `stream` into `inbox` until it closes.
fn spawn_reader(stream: TcpStream, inbox: Sender<(ServerId, Message)>, links: Option<Links>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(match stream.try_clone() {
            Ok(s) => s,
            Err(_) => return,
        });
        while let Ok(Some((from, msg))) = read_frame(&mut reader) {
            if let Some(l) = &links {
                l.adopt(from, &stream);
            }
            if inbox.send((from, msg)).is_err() {
                return;
            }
        }
    });
}

/// A running server. Dropping the handle does not stop it; call
/// [`NodeHandle::stop`].
pub struct NodeHandle {
    pub id: ServerId,
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl NodeHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves `service` on `listener`, one thread for the protocol loop and
/// one per connection for reading.
pub fn serve<S: Service + Send>(
    service: S,
    id: ServerId,
    listener: TcpListener,
    directory: Directory,
) -> io::Result<NodeHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let links = Links {
        me: id,
        directory: Arc::new(directory),
        streams: Arc::default(),
    };

    listener.set_nonblocking(true)?;
    let accept_links = links.clone();
    let accept_tx = tx.clone();
    let accept_stop = stop.clone();
    thread::spawn(move || {
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((s, _)) => {
                    if s.set_nonblocking(false).is_ok() && s.set_nodelay(true).is_ok() {
                        spawn_reader(s, accept_tx.clone(), Some(accept_links.clone()));
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5))
                }
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        }
    });

    let loop_stop = stop.clone();
    let thread = thread::spawn(move || run_loop(service, rx, tx, links, loop_stop));
    Ok(NodeHandle {
        id,
        addr,
        stop,
        thread: Some(thread),
    })
}

fn run_loop<S: Service>(
    mut service: S,
    rx: Receiver<(ServerId, Message)>,
    tx: Sender<(ServerId, Message)>,
    links: Links,
    stop: Arc<AtomicBool>,
) {
    let start = Instant::now();
    let now_us = || start.elapsed().as_micros() as u64;
    let mut timers: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
    while !stop.load(Ordering::SeqCst) {
        let mut out = Outbox::default();
        let now = now_us();
        if let Some(&Reverse((due, token))) = timers.peek() {
            if due <= now {
                timers.pop();
                service.timer(now, token, &mut out);
            }
        }
        if out.sends.is_empty() && out.timers.is_empty() {
            let wait = timers.peek().map_or(50_000, |Reverse((due, _))| {
                due.saturating_sub(now).min(50_000)
            });
            match rx.recv_timeout(Duration::from_micros(wait.max(1))) {
                Ok((from, msg)) => service.handle(now_us(), from, msg, &mut out),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
        let now = now_us();
        for (delay, token) in out.timers {
            timers.push(Reverse((now + delay, token)));
        }
        for (to, msg) in out.sends {
            if to == links.me {
                let _ = tx.send((to, msg));
            } else {
                links.send(to, &msg, &tx);
            }
        }
    }
}

/// A client speaking to live servers listed in a directory.
pub struct NetClient {
    links: Links,
    inbox: Receiver<(ServerId, Message)>,
    tx: Sender<(ServerId, Message)>,
    start: Instant,
}

impl NetClient {
    pub fn new(id: ServerId, directory: Directory) -> Self {
        let (tx, inbox) = mpsc::channel();
        NetClient {
            links: Links {
                me: id,
                directory: Arc::new(directory),
                streams: Arc::default(),
            },
            inbox,
            tx,
            start: Instant::now(),
        }
    }

    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    /// Drives `op` to completion against the live servers.
    pub fn run<O: ClientOp>(
        &mut self,
        mut op: O,
        timeout: Duration,
    ) -> Result<O::Output, NetError> {
        let deadline = Instant::now() + timeout;
        let mut step = op.start(self.now_us());
        loop {
            match step {
                Step::Done(out) => return Ok(out),
                Step::Pending(sends) => {
                    for (to, msg) in sends {
                        self.links.send(to, &msg, &self.tx);
                    }
                }
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(NetError::TimedOut);
            }
            let (from, msg) = match self.inbox.recv_timeout(left) {
                Ok(m) => m,
                Err(_) => return Err(NetError::TimedOut),
            };
            step = op.on_reply(self.now_us(), from, &msg);
        }
    }
}
