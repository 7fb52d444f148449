//! Binary request/response protocol for a remote score oracle.
//!
//! ```text
//! request   "LEBA1" | C u32 | H u32 | W u32 | C*H*W x f64
//! response  status u8 | K u32 | K x f64 | counter u64
//! ```
//!
//! All integers and floats are little-endian. Status is 0 (ok),
//! 1 (budget exceeded) or 2 (malformed request; the connection stays open).
//! Error responses carry `K = 0` and the current counter. One request per
//! round trip, sequential per connection; all connections share the oracle's
//! counter.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::Tensor;

use super::{MeteredOracle, OracleResponse, ScoreOracle};

pub const REQUEST_MAGIC: &[u8; 5] = b"LEBA1";
pub const STATUS_OK: u8 = 0;
pub const STATUS_BUDGET: u8 = 1;
pub const STATUS_MALFORMED: u8 = 2;

/// Largest image (in values) a server will read.
pub const MAX_VALUES: usize = 1 << 24;

/// How long a server waits for the rest of a frame once it has started.
pub const DEFAULT_FRAME_TIMEOUT: Duration = Duration::from_millis(500);

const HEADER_LEN: usize = 5 + 12;

pub fn encode_request(x: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = x.shape() else {
        return Err(Error::Malformed(format!("image must be [C, H, W], got {:?}", x.shape())));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + x.len() * 8);
    out.extend_from_slice(REQUEST_MAGIC);
    for d in [*c, *h, *w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&x.to_le_bytes());
    Ok(out)
}

fn parse_header(b: &[u8]) -> Result<[usize; 3]> {
    if &b[..5] != REQUEST_MAGIC {
        return Err(Error::Malformed("bad request magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(b[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match n {
        Some(n) if n > 0 && n <= MAX_VALUES => Ok(dims),
        _ => Err(Error::Malformed(format!("unsupported image shape {dims:?}"))),
    }
}

fn f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Decode a complete request frame.
pub fn decode_request(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Malformed(format!("truncated header ({} bytes)", buf.len())));
    }
    let dims = parse_header(&buf[..HEADER_LEN])?;
    let n: usize = dims.iter().product();
    let body = &buf[HEADER_LEN..];
    if body.len() != n * 8 {
        return Err(Error::Malformed(format!(
            "payload is {} bytes, shape {dims:?} needs {}",
            body.len(),
            n * 8
        )));
    }
    Tensor::new(&dims, f64s(body)).map_err(|e| Error::Malformed(e.to_string()))
}

pub fn encode_response(status: u8, probs: &[f64], counter: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + probs.len() * 8);
    out.push(status);
    out.extend_from_slice(&(probs.len() as u32).to_le_bytes());
    for p in probs {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&counter.to_le_bytes());
    out
}

/// A decoded response frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseFrame {
    pub status: u8,
    pub probs: Vec<f64>,
    pub counter: u64,
}

pub fn read_response(r: &mut impl Read) -> Result<ResponseFrame> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let k = u32::from_le_bytes(head[1..5].try_into().expect("4 bytes")) as usize;
    if k > MAX_VALUES {
        return Err(Error::Malformed(format!("response claims {k} classes")));
    }
    let mut body = vec![0u8; k * 8 + 8];
    r.read_exact(&mut body)?;
    Ok(ResponseFrame {
        status: head[0],
        probs: f64s(&body[..k * 8]),
        counter: u64::from_le_bytes(body[k * 8..].try_into().expect("8 bytes")),
    })
}

pub fn decode_response(buf: &[u8]) -> Result<ResponseFrame> {
    let mut cur = buf;
    let frame = read_response(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Malformed("trailing bytes after response".into()));
    }
    Ok(frame)
}

// ---- server ------------------------------------------------------------------

enum FrameRead {
    Frame(Tensor),
    Malformed(String),
    Closed,
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Discard whatever arrives until the line goes quiet for one frame timeout.
fn drain(stream: &mut TcpStream) -> std::io::Result<bool> {
    let mut sink = [0u8; 4096];
    loop {
        match stream.read(&mut sink) {
            Ok(0) => return Ok(false),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => return Ok(true),
            Err(e) => return Err(e),
        }
    }
}

/// Read exactly `buf.len()` bytes; `Ok(false)` on timeout or EOF.
fn fill(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<(bool, bool)> {
    let mut got = 0;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) => return Ok((false, true)),
            Ok(n) => got += n,
            Err(e) if is_timeout(&e) => return Ok((false, false)),
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok((true, false))
}

fn read_frame(stream: &mut TcpStream, timeout: Duration) -> std::io::Result<FrameRead> {
    // wait indefinitely for the first byte of a frame
    stream.set_read_timeout(None)?;
    let mut header = [0u8; HEADER_LEN];
    loop {
        match stream.read(&mut header[..1]) {
            Ok(0) => return Ok(FrameRead::Closed),
            Ok(_) => break,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    stream.set_read_timeout(Some(timeout))?;
    let (ok, eof) = fill(stream, &mut header[1..])?;
    if !ok {
        if eof {
            return Ok(FrameRead::Closed);
        }
        return Ok(FrameRead::Malformed("truncated header".into()));
    }
    let dims = match parse_header(&header) {
        Ok(d) => d,
        Err(e) => {
            drain(stream)?;
            return Ok(FrameRead::Malformed(e.to_string()));
        }
    };
    let n: usize = dims.iter().product();
    let mut body = vec![0u8; n * 8];
    let (ok, eof) = fill(stream, &mut body)?;
    if !ok {
        if eof {
            return Ok(FrameRead::Closed);
        }
        return Ok(FrameRead::Malformed("truncated payload".into()));
    }
    Ok(match Tensor::new(&dims, f64s(&body)) {
        Ok(t) => FrameRead::Frame(t),
        Err(e) => FrameRead::Malformed(e.to_string()),
    })
}

fn handle_connection(mut stream: TcpStream, oracle: &MeteredOracle, timeout: Duration) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let reply = match read_frame(&mut stream, timeout)? {
            FrameRead::Closed => return Ok(()),
            FrameRead::Malformed(msg) => {
                log::debug!("malformed request: {msg}");
                encode_response(STATUS_MALFORMED, &[], oracle.queries_used())
            }
            FrameRead::Frame(x) => match oracle.query(&x) {
                Ok(r) => encode_response(STATUS_OK, &r.probs, r.query_index),
                Err(Error::BudgetExceeded { used }) => encode_response(STATUS_BUDGET, &[], used),
                Err(e) => {
                    log::debug!("rejected request: {e}");
                    encode_response(STATUS_MALFORMED, &[], oracle.queries_used())
                }
            },
        };
        stream.write_all(&reply)?;
    }
}

/// Accept connections until `stop` is set, one thread per connection.
pub fn serve(
    listener: TcpListener,
    oracle: Arc<MeteredOracle>,
    frame_timeout: Duration,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let oracle = oracle.clone();
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &oracle, frame_timeout) {
                        log::debug!("connection {peer} ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        match self.thread.take().map(JoinHandle::join) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Contract("server thread panicked".into())),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Bind `addr` (port 0 picks a free port) and serve in the background.
pub fn spawn_server(addr: impl ToSocketAddrs, oracle: Arc<MeteredOracle>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::spawn(move || serve(listener, oracle, DEFAULT_FRAME_TIMEOUT, flag));
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

// ---- client ------------------------------------------------------------------

/// Client side of the protocol; implements [`ScoreOracle`].
#[derive(Debug)]
pub struct RemoteOracle {
    stream: Mutex<TcpStream>,
    counter: AtomicU64,
}

impl RemoteOracle {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream: Mutex::new(stream),
            counter: AtomicU64::new(0),
        })
    }

    /// Send arbitrary bytes and read one response frame.
    pub fn round_trip_raw(&self, frame: &[u8]) -> Result<ResponseFrame> {
        let mut s = self.stream.lock().expect("client stream poisoned");
        s.write_all(frame)?;
        let r = read_response(&mut *s)?;
        self.counter.store(r.counter, Ordering::SeqCst);
        Ok(r)
    }

    /// Send the request frame for `x` and return the raw response.
    pub fn remote_query(&self, x: &Tensor) -> Result<ResponseFrame> {
        self.round_trip_raw(&encode_request(x)?)
    }
}

impl ScoreOracle for RemoteOracle {
    fn query(&self, x: &Tensor) -> Result<OracleResponse> {
        let r = self.remote_query(x)?;
        match r.status {
            STATUS_OK => Ok(OracleResponse {
                probs: r.probs,
                query_index: r.counter,
            }),
            STATUS_BUDGET => Err(Error::BudgetExceeded { used: r.counter }),
            _ => Err(Error::Malformed("server rejected the request".into())),
        }
    }

    /// The server-side counter as of the last response.
    fn queries_used(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}
