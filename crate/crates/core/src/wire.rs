//! Length-prefixed frames for talking to an external denoiser.
//!
//! A frame is a 4-byte big-endian header length, a UTF-8 JSON header, then
//! `product(shape)` little-endian `f32` values (no payload when the header
//! has no `shape`). A session opens with `{"op":"hello","version":1}` from
//! each side; requests use `"op":"denoise"` and are answered with
//! `"op":"result"` or `"op":"error"`.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::denoiser::{DenoiseError, Denoiser};
use crate::testbed::GaussianPrior;

pub const PROTOCOL_VERSION: u64 = 1;
pub const MAX_HEADER_BYTES: usize = 1 << 20;
pub const MAX_PAYLOAD_VALUES: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection error: {0}")]
    Connection(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("shape mismatch: sent {expected:?}, received {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Map<String, Value>,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn new(header: Value, payload: Vec<f32>) -> Self {
        let header = match header {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        Self { header, payload }
    }

    pub fn op(&self) -> Option<&str> {
        self.header.get("op").and_then(Value::as_str)
    }

    pub fn shape(&self) -> Result<Option<Vec<usize>>, WireError> {
        parse_shape(&self.header)
    }
}

fn parse_shape(header: &Map<String, Value>) -> Result<Option<Vec<usize>>, WireError> {
    let Some(v) = header.get("shape") else { return Ok(None) };
    let arr = v.as_array().ok_or_else(|| WireError::Protocol("shape must be an array".into()))?;
    arr.iter()
        .map(|d| {
            d.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| WireError::Protocol("shape entries must be nonnegative integers".into()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn io_err(e: io::Error) -> WireError {
    WireError::Connection(e.to_string())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Protocol("truncated frame length".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    let hlen = u32::from_be_bytes(len) as usize;
    if hlen > MAX_HEADER_BYTES {
        return Err(WireError::Protocol(format!("header of {hlen} bytes")));
    }
    let body_err = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Protocol("truncated frame".into())
        } else {
            io_err(e)
        }
    };
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(body_err)?;
    let header: Value =
        serde_json::from_slice(&hbytes).map_err(|e| WireError::Protocol(format!("bad header: {e}")))?;
    let Value::Object(header) = header else {
        return Err(WireError::Protocol("header is not a JSON object".into()));
    };
    let count = match parse_shape(&header)? {
        Some(shape) => shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_PAYLOAD_VALUES)
            .ok_or_else(|| WireError::Protocol("payload too large".into()))?,
        None => 0,
    };
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(body_err)?;
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(Frame { header, payload }))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    let header = serde_json::to_vec(&frame.header).map_err(|e| WireError::Protocol(e.to_string()))?;
    let mut buf = Vec::with_capacity(4 + header.len() + 4 * frame.payload.len());
    buf.extend_from_slice(&(header.len() as u32).to_be_bytes());
    buf.extend_from_slice(&header);
    for v in &frame.payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn hello() -> Frame {
    Frame::new(json!({"op": "hello", "version": PROTOCOL_VERSION}), Vec::new())
}

fn check_hello(frame: Option<Frame>) -> Result<(), WireError> {
    let frame = frame.ok_or_else(|| WireError::Connection("closed before hello".into()))?;
    if frame.op() != Some("hello") {
        return Err(WireError::Protocol(format!("expected hello, got {:?}", frame.op())));
    }
    match frame.header.get("version").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => Ok(()),
        v => Err(WireError::Protocol(format!("unsupported protocol version {v:?}"))),
    }
}

/// Client side of the protocol; one request in flight at a time.
pub struct RemoteDenoiser<R: Read, W: Write> {
    reader: R,
    writer: W,
    child: Option<Child>,
}

impl<R: Read, W: Write> RemoteDenoiser<R, W> {
    /// Performs the hello exchange over an established stream pair.
    pub fn handshake(mut reader: R, mut writer: W) -> Result<Self, WireError> {
        write_frame(&mut writer, &hello())?;
        check_hello(read_frame(&mut reader)?)?;
        Ok(Self { reader, writer, child: None })
    }

    pub fn request(&mut self, x_t: &[f64], t: usize, alpha_bar: f64) -> Result<Vec<f64>, WireError> {
        let shape = vec![x_t.len()];
        let req = Frame::new(
            json!({"op": "denoise", "t": t, "alpha_bar": alpha_bar, "shape": shape}),
            x_t.iter().map(|&v| v as f32).collect(),
        );
        write_frame(&mut self.writer, &req)?;
        let resp = read_frame(&mut self.reader)?
            .ok_or_else(|| WireError::Connection("server closed the connection".into()))?;
        match resp.op() {
            Some("result") => {}
            Some("error") => {
                let field = |k: &str| resp.header.get(k).map(|v| v.as_str().map_or(v.to_string(), str::to_string));
                return Err(WireError::Remote {
                    code: field("code").unwrap_or_default(),
                    message: field("message").unwrap_or_default(),
                });
            }
            other => return Err(WireError::Protocol(format!("unexpected op {other:?}"))),
        }
        let got = resp.shape()?.ok_or_else(|| WireError::Protocol("result without shape".into()))?;
        if got != shape {
            return Err(WireError::ShapeMismatch { expected: shape, got });
        }
        Ok(resp.payload.into_iter().map(f64::from).collect())
    }
}

impl RemoteDenoiser<BufReader<TcpStream>, BufWriter<TcpStream>> {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr).map_err(io_err)?;
        stream.set_nodelay(true).map_err(io_err)?;
        let read_half = stream.try_clone().map_err(io_err)?;
        Self::handshake(BufReader::new(read_half), BufWriter::new(stream))
    }
}

impl RemoteDenoiser<BufReader<ChildStdout>, BufWriter<ChildStdin>> {
    /// Starts `program` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, WireError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(io_err)?;
        let stdin = child.stdin.take().ok_or_else(|| WireError::Connection("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| WireError::Connection("no stdout".into()))?;
        let mut client = Self::handshake(BufReader::new(stdout), BufWriter::new(stdin))?;
        client.child = Some(child);
        Ok(client)
    }
}

impl<R: Read, W: Write> Drop for RemoteDenoiser<R, W> {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<R: Read, W: Write> Denoiser for RemoteDenoiser<R, W> {
    fn denoise(&mut self, x_t: &[f64], t: usize, alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        Ok(self.request(x_t, t, alpha_bar)?)
    }
}

/// Server-side computation for one request.
pub trait Backend {
    fn denoise(&mut self, x_t: &[f32], t: usize, alpha_bar: f64) -> Result<Vec<f32>, String>;
}

/// Echoes the request payload.
pub struct IdentityBackend;

impl Backend for IdentityBackend {
    fn denoise(&mut self, x_t: &[f32], _t: usize, _alpha_bar: f64) -> Result<Vec<f32>, String> {
        Ok(x_t.to_vec())
    }
}

/// Posterior mean under a Gaussian prior.
pub struct GaussianBackend(pub GaussianPrior);

impl Backend for GaussianBackend {
    fn denoise(&mut self, x_t: &[f32], _t: usize, alpha_bar: f64) -> Result<Vec<f32>, String> {
        let x: Vec<f64> = x_t.iter().map(|&v| f64::from(v)).collect();
        self.0
            .posterior_mean(&x, alpha_bar)
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .map_err(|e| e.to_string())
    }
}

fn error_frame(code: &str, message: &str) -> Frame {
    Frame::new(json!({"op": "error", "code": code, "message": message}), Vec::new())
}

/// Serves one connection until the peer closes it. Protocol violations are
/// answered with an error frame and end the session.
pub fn serve<R: Read, W: Write, B: Backend + ?Sized>(reader: &mut R, writer: &mut W, backend: &mut B) -> Result<(), WireError> {
    let first = read_frame(reader)?;
    if let Err(e) = check_hello(first) {
        let _ = write_frame(writer, &error_frame("handshake", &e.to_string()));
        return Err(e);
    }
    write_frame(writer, &hello())?;
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = write_frame(writer, &error_frame("protocol", &e.to_string()));
                return Err(e);
            }
        };
        if frame.op() != Some("denoise") {
            let e = WireError::Protocol(format!("unexpected op {:?}", frame.op()));
            write_frame(writer, &error_frame("protocol", &e.to_string()))?;
            return Err(e);
        }
        let t = frame.header.get("t").and_then(Value::as_u64);
        let ab = frame.header.get("alpha_bar").and_then(Value::as_f64);
        let shape = frame.shape()?;
        let (Some(t), Some(ab), Some(shape)) = (t, ab, shape) else {
            let e = WireError::Protocol("denoise needs t, alpha_bar and shape".into());
            write_frame(writer, &error_frame("protocol", &e.to_string()))?;
            return Err(e);
        };
        match backend.denoise(&frame.payload, t as usize, ab) {
            Ok(out) if out.len() == frame.payload.len() => {
                let resp = Frame::new(json!({"op": "result", "t": t, "alpha_bar": ab, "shape": shape}), out);
                write_frame(writer, &resp)?;
            }
            Ok(out) => {
                let msg = format!("backend returned {} values for {}", out.len(), frame.payload.len());
                write_frame(writer, &error_frame("backend", &msg))?;
            }
            Err(msg) => write_frame(writer, &error_frame("backend", &msg))?,
        }
    }
}
