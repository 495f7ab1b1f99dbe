use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::{self, JoinHandle};

use serde_json::json;
use tdcm::codec::{self, DecodeOptions, EncodeParams, ImageShape};
use tdcm::denoiser::Denoiser;
use tdcm::testbed::GaussianPrior;
use tdcm::wire::{self, Backend, Frame, GaussianBackend, IdentityBackend, RemoteDenoiser, WireError};

/// Serves `connections` sequential connections on an ephemeral port.
fn spawn_server(connections: usize, make: impl Fn() -> Box<dyn Backend> + Send + 'static) -> (SocketAddr, JoinHandle<Vec<Result<(), WireError>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        (0..connections)
            .map(|_| {
                let (stream, _) = listener.accept().unwrap();
                let reader = stream.try_clone().unwrap();
                let mut backend = make();
                wire::serve(&mut BufReader::new(reader), &mut BufWriter::new(stream), &mut *backend)
            })
            .collect()
    });
    (addr, handle)
}

fn probe(d: usize) -> Vec<f64> {
    (0..d).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect()
}

#[test]
fn identity_backend_echoes_bytes() {
    let (addr, server) = spawn_server(1, || Box::new(IdentityBackend));
    let mut client = RemoteDenoiser::connect(addr).unwrap();
    let x: Vec<f64> = probe(333).iter().map(|&v| f64::from(v as f32)).collect();
    let y = client.request(&x, 5, 0.3).unwrap();
    let bytes = |v: &[f64]| v.iter().flat_map(|&a| (a as f32).to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(&x), bytes(&y));
    drop(client);
    assert!(server.join().unwrap()[0].is_ok());
}

#[test]
fn gaussian_backend_matches_in_process_oracle() {
    let d = 256;
    let (addr, server) = spawn_server(1, move || Box::new(GaussianBackend(GaussianPrior::default_ramp(d))));
    let mut client = RemoteDenoiser::connect(addr).unwrap();
    let prior = GaussianPrior::default_ramp(d);
    let x = probe(d);
    for (t, ab) in [(1, 0.9999), (7, 0.5), (20, 0.02)] {
        let remote = client.denoise(&x, t, ab).unwrap();
        let local = prior.posterior_mean(&x, ab).unwrap();
        let worst = remote.iter().zip(&local).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-5, "t={t}: {worst}");
    }
    drop(client);
    server.join().unwrap();
}

#[test]
fn remote_round_trip_matches_in_process() {
    let shape = ImageShape::new(8, 16, 1, 1);
    let d = shape.dim();
    let prior = GaussianPrior::default_ramp(d);
    let x0 = prior.sample(11, 0);
    let params = EncodeParams { steps: 10, atoms: 256, selected: 12, bits: 2, seed: 5, ..Default::default() };

    let mut local = prior.clone();
    let reference = codec::encode(&x0, shape, &mut local, &params, None).unwrap();

    let (addr, server) = spawn_server(2, move || Box::new(GaussianBackend(GaussianPrior::default_ramp(d))));
    let mut remote = RemoteDenoiser::connect(addr).unwrap();
    let enc = codec::encode(&x0, shape, &mut remote, &params, None).unwrap();
    drop(remote);
    let mut remote = RemoteDenoiser::connect(addr).unwrap();
    let dec = codec::decode(&enc.container, &mut remote, &DecodeOptions::default()).unwrap();
    drop(remote);
    server.join().unwrap();

    assert_eq!(dec, enc.reconstruction);
    let worst = dec.iter().zip(&reference.reconstruction).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "{worst}");
}

fn raw_hello(stream: &mut TcpStream) {
    let mut buf = Vec::new();
    wire::write_frame(&mut buf, &Frame::new(json!({"op": "hello", "version": 1}), Vec::new())).unwrap();
    stream.write_all(&buf).unwrap();
    let ack = wire::read_frame(stream).unwrap().unwrap();
    assert_eq!(ack.op(), Some("hello"));
}

#[test]
fn malformed_length_is_a_protocol_error() {
    let (addr, server) = spawn_server(1, || Box::new(IdentityBackend));
    let mut stream = TcpStream::connect(addr).unwrap();
    raw_hello(&mut stream);
    // Header length points past the end of the stream.
    stream.write_all(&1000u32.to_be_bytes()).unwrap();
    stream.write_all(b"{\"op\":").unwrap();
    stream.shutdown(std::net::Shutdown::Write).unwrap();
    let reply = wire::read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(reply.op(), Some("error"));
    assert_eq!(reply.header["code"], "protocol");
    let result = server.join().unwrap().remove(0);
    assert!(matches!(result, Err(WireError::Protocol(_))), "{result:?}");
}

#[test]
fn payload_shorter_than_shape_is_rejected() {
    let mut buf = Vec::new();
    let header = br#"{"op":"denoise","t":1,"alpha_bar":0.5,"shape":[4]}"#;
    buf.extend_from_slice(&(header.len() as u32).to_be_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(&[0u8; 8]);
    assert!(matches!(wire::read_frame(&mut Cursor::new(buf)), Err(WireError::Protocol(_))));
}

#[test]
fn dropped_server_is_a_connection_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut sink = [0u8; 64];
        let _ = s.read(&mut sink);
        let mut buf = Vec::new();
        wire::write_frame(&mut buf, &Frame::new(json!({"op": "hello", "version": 1}), Vec::new())).unwrap();
        s.write_all(&buf).unwrap();
    });
    let mut client = RemoteDenoiser::connect(addr).unwrap();
    server.join().unwrap();
    let err = client.request(&[1.0, 2.0], 3, 0.5).unwrap_err();
    assert!(matches!(err, WireError::Connection(_) | WireError::Protocol(_)), "{err:?}");
}

#[test]
fn version_mismatch_is_refused() {
    let (addr, server) = spawn_server(1, || Box::new(IdentityBackend));
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut buf = Vec::new();
    wire::write_frame(&mut buf, &Frame::new(json!({"op": "hello", "version": 2}), Vec::new())).unwrap();
    stream.write_all(&buf).unwrap();
    let reply = wire::read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(reply.op(), Some("error"));
    assert!(server.join().unwrap()[0].is_err());
}

#[test]
fn cli_serves_over_tcp() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_tdcm"))
        .args(["serve", "--listen", &addr, "--backend", "identity", "--connections", "1"])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(&mut BufReader::new(child.stderr.as_mut().unwrap()), &mut line).unwrap();
    assert!(line.starts_with("listening on"), "{line}");
    let mut client = RemoteDenoiser::connect(&addr).unwrap();
    assert_eq!(client.request(&[0.5, -1.0, 2.0], 2, 0.7).unwrap(), vec![0.5, -1.0, 2.0]);
    drop(client);
    assert!(child.wait().unwrap().success());
}
