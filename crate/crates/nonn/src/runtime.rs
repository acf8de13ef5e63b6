//! Coordinator/worker execution over TCP.
//!
//! Device numbering in [`CommStats`]: 0 is the coordinator, worker or split
//! device `i` is `i + 1`.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use nonn_core::engine::{EngineError, OpCounter, Tensor, TensorProgram};
use nonn_core::math::argmax;
use nonn_core::trace::FcHead;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{decode_program, encode_program, ImageSet, ProgramManifest};
use crate::wire::{self, error_code, Frame, HelloReply, MsgType, WireError, PROTOCOL_VERSION};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("worker {worker} ({addr}): {source}")]
    Worker { worker: usize, addr: String, source: WireError },
    #[error("setup: {0}")]
    Setup(String),
    #[error("layer {layer} has {out_ch} output channels, not divisible by {n_devices}")]
    Indivisible { layer: usize, out_ch: usize, n_devices: usize },
    #[error("image {image}: {reason}")]
    Image { image: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Traffic seen by one device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceComm {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

/// Traffic attributable to one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageComm {
    pub image: usize,
    pub bytes: u64,
    pub messages: u64,
    /// INFER_RESP wire bytes.
    pub response_bytes: u64,
    /// LAYER_EXCHANGE payload bytes.
    pub exchange_payload_bytes: u64,
}

/// Wire-level accounting. All byte counts include frame headers unless
/// named `payload`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub devices: Vec<DeviceComm>,
    pub images: Vec<ImageComm>,
    /// HELLO, LOAD_PROGRAM and SHUTDOWN traffic.
    pub setup_bytes: u64,
    pub layer_exchange_messages: u64,
    pub layer_exchange_payload_bytes: u64,
    pub response_bytes: u64,
    pub response_payload_bytes: u64,
}

impl CommStats {
    fn with_devices(n: usize) -> Self {
        Self { devices: vec![DeviceComm::default(); n], ..Self::default() }
    }

    fn record(&mut self, from: usize, to: usize, bytes: u64) {
        self.devices[from].bytes_sent += bytes;
        self.devices[from].messages_sent += 1;
        self.devices[to].bytes_received += bytes;
        self.devices[to].messages_received += 1;
    }

    pub fn total_sent(&self) -> u64 {
        self.devices.iter().map(|d| d.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.devices.iter().map(|d| d.bytes_received).sum()
    }

    /// Every byte sent was received by someone.
    pub fn is_conserved(&self) -> bool {
        self.total_sent() == self.total_received()
            && self.devices.iter().map(|d| d.messages_sent).sum::<u64>() == self.devices.iter().map(|d| d.messages_received).sum::<u64>()
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }

    fn connect(addr: &str, timeout: Duration) -> Result<Self, WireError> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{addr} resolved to no address"));
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(timeout))?;
                    return Ok(Self::new(s)?);
                }
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    fn send(&mut self, t: MsgType, payload: Vec<u8>) -> Result<u64, WireError> {
        Ok(wire::send(&mut self.writer, t, payload)? as u64)
    }

    fn recv(&mut self) -> Result<Frame, WireError> {
        wire::read_frame(&mut self.reader)
    }

    fn close(&self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

/// Worker settings.
#[derive(Debug, Clone, Default)]
pub struct WorkerConfig {
    /// Program served until a connection loads another.
    pub program: Option<Arc<TensorProgram>>,
    /// Sleep before answering each INFER_REQ.
    pub delay: Duration,
}

pub struct WorkerHandle {
    addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
    stats: Arc<Mutex<DeviceComm>>,
}

impl WorkerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Traffic seen by the worker since it started.
    pub fn stats(&self) -> DeviceComm {
        *self.stats.lock().expect("stats lock")
    }

    /// Sends SHUTDOWN and waits for the accept loop to exit.
    pub fn shutdown(mut self) -> Result<(), WireError> {
        let result = shutdown_worker(&self.addr.to_string(), DEFAULT_TIMEOUT);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        result
    }
}

/// Asks the worker at `addr` to stop.
pub fn shutdown_worker(addr: &str, timeout: Duration) -> Result<(), WireError> {
    let mut c = Conn::connect(addr, timeout)?;
    c.send(MsgType::Shutdown, Vec::new())?;
    // the worker closes the connection once the flag is set
    let _ = c.recv();
    Ok(())
}

/// Binds `addr` and serves on a background thread.
pub fn spawn_worker(addr: &str, cfg: WorkerConfig) -> io::Result<WorkerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stats = Arc::new(Mutex::new(DeviceComm::default()));
    let s = Arc::clone(&stats);
    let thread = thread::Builder::new().name(format!("worker-{local}")).spawn(move || {
        if let Err(e) = serve_with_stats(listener, cfg, s) {
            warn!("worker {local}: {e}");
        }
    })?;
    Ok(WorkerHandle { addr: local, thread: Some(thread), stats })
}

/// Accepts connections until a SHUTDOWN arrives. Each connection is served
/// sequentially on its own thread.
pub fn serve(listener: TcpListener, cfg: WorkerConfig) -> io::Result<()> {
    serve_with_stats(listener, cfg, Arc::new(Mutex::new(DeviceComm::default())))
}

fn serve_with_stats(listener: TcpListener, cfg: WorkerConfig, stats: Arc<Mutex<DeviceComm>>) -> io::Result<()> {
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    info!("worker listening on {local}");
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let (cfg, stats, stop) = (cfg.clone(), Arc::clone(&stats), Arc::clone(&stop));
        thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            match handle_connection(stream, cfg, &stats) {
                Ok(true) => {
                    stop.store(true, Ordering::SeqCst);
                    // wake the accept loop
                    let _ = TcpStream::connect(local);
                }
                Ok(false) => debug!("connection {peer} closed"),
                Err(e) => debug!("connection {peer}: {e}"),
            }
        });
    }
    info!("worker {local} stopped");
    Ok(())
}

fn hello_for(program: Option<&TensorProgram>) -> HelloReply {
    match program {
        Some(p) => {
            let s = p.input_shape();
            HelloReply { version: PROTOCOL_VERSION, output_width: p.output_width() as u32, input: [s.c as u32, s.h as u32, s.w as u32] }
        }
        None => HelloReply { version: PROTOCOL_VERSION, output_width: 0, input: [0; 3] },
    }
}

fn load_program_payload(payload: &[u8]) -> Result<TensorProgram, String> {
    let (manifest, blob) = wire::decode_load_program(payload).map_err(|e| e.to_string())?;
    let manifest: ProgramManifest = serde_json::from_slice(manifest).map_err(|e| format!("manifest: {e}"))?;
    decode_program(manifest, blob).map_err(|e| e.to_string())
}

fn infer_payload(program: &TensorProgram, payload: &[u8]) -> Result<Vec<f32>, (u32, String)> {
    let (_, pixels) = wire::decode_infer_request(payload).map_err(|e| (error_code::BAD_PAYLOAD, e.to_string()))?;
    let input = Tensor::new(program.input_shape(), pixels).map_err(|e| (error_code::BAD_PAYLOAD, e.to_string()))?;
    program.infer(&input).map_err(|e| (error_code::INFERENCE, e.to_string()))
}

/// Returns `Ok(true)` when the peer asked the worker to stop.
fn handle_connection(stream: TcpStream, cfg: WorkerConfig, stats: &Mutex<DeviceComm>) -> Result<bool, WireError> {
    let mut conn = Conn::new(stream)?;
    let mut program = cfg.program.clone();
    loop {
        let frame = match conn.recv() {
            Ok(f) => f,
            Err(WireError::Closed) => return Ok(false),
            Err(e) => return Err(e),
        };
        {
            let mut s = stats.lock().expect("stats lock");
            s.bytes_received += frame.wire_len() as u64;
            s.messages_received += 1;
        }
        let (t, payload) = match frame.kind() {
            Some(MsgType::Hello) => (MsgType::Hello, wire::encode_hello_reply(&hello_for(program.as_deref()))),
            Some(MsgType::LoadProgram) => match load_program_payload(&frame.payload) {
                Ok(p) => {
                    let p = Arc::new(p);
                    let reply = wire::encode_hello_reply(&hello_for(Some(&p)));
                    program = Some(p);
                    (MsgType::Hello, reply)
                }
                Err(e) => (MsgType::Error, wire::encode_error(error_code::BAD_PAYLOAD, &e)),
            },
            Some(MsgType::InferReq) => match program.as_deref() {
                None => (MsgType::Error, wire::encode_error(error_code::NO_PROGRAM, "no program loaded")),
                Some(p) => {
                    if !cfg.delay.is_zero() {
                        thread::sleep(cfg.delay);
                    }
                    match infer_payload(p, &frame.payload) {
                        Ok(out) => (MsgType::InferResp, wire::f32s_to_bytes(&out)),
                        Err((code, msg)) => (MsgType::Error, wire::encode_error(code, &msg)),
                    }
                }
            },
            Some(MsgType::Shutdown) => {
                conn.close();
                return Ok(true);
            }
            Some(other) => {
                (MsgType::Error, wire::encode_error(error_code::UNEXPECTED, &format!("worker does not accept {other:?}")))
            }
            None => (MsgType::Error, wire::encode_error(error_code::UNKNOWN_TYPE, &format!("unknown message type {}", frame.msg_type))),
        };
        let frame = Frame::new(t, payload);
        // counted before writing so a peer that has read the reply sees it
        {
            let mut s = stats.lock().expect("stats lock");
            s.bytes_sent += frame.wire_len() as u64;
            s.messages_sent += 1;
        }
        wire::write_frame(&mut conn.writer, &frame)?;
    }
}

/// Coordinator settings for NoNN inference.
#[derive(Debug, Clone, Copy)]
pub struct NonnOptions {
    pub timeout: Duration,
    /// Zero-fill students that fail instead of failing the image.
    pub degraded: bool,
}

impl Default for NonnOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, degraded: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image: usize,
    pub prediction: Option<usize>,
    /// Workers whose output was zero-filled or missing.
    pub missing: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonnRun {
    pub widths: Vec<usize>,
    pub outcomes: Vec<ImageOutcome>,
    pub stats: CommStats,
}

impl NonnRun {
    /// All predictions, or `None` if any image failed.
    pub fn predictions(&self) -> Option<Vec<usize>> {
        self.outcomes.iter().map(|o| o.prediction).collect()
    }

    pub fn accuracy(&self, labels: &[u32]) -> f64 {
        let correct = self.outcomes.iter().zip(labels).filter(|(o, l)| o.prediction == Some(**l as usize)).count();
        correct as f64 / labels.len().max(1) as f64
    }
}

struct Job {
    image: usize,
    payload: Arc<Vec<u8>>,
}

struct LinkReply {
    worker: usize,
    image: usize,
    output: Result<Vec<f32>, String>,
    sent: Option<u64>,
    received: Option<u64>,
}

fn link_loop(worker: usize, mut conn: Conn, jobs: mpsc::Receiver<Job>, replies: mpsc::Sender<LinkReply>) {
    let mut dead: Option<String> = None;
    for job in jobs {
        let mut reply = LinkReply { worker, image: job.image, output: Err(String::new()), sent: None, received: None };
        if let Some(reason) = &dead {
            reply.output = Err(reason.clone());
        } else {
            let frame = Frame { msg_type: MsgType::InferReq as u8, payload: job.payload.to_vec() };
            let result = wire::write_frame(&mut conn.writer, &frame).and_then(|n| {
                reply.sent = Some(n as u64);
                let f = conn.recv()?;
                reply.received = Some(f.wire_len() as u64);
                let is_resp = f.kind() == Some(MsgType::InferResp);
                let payload = f.expect(MsgType::InferResp)?;
                debug_assert!(is_resp);
                wire::bytes_to_f32s("INFER_RESP", &payload)
            });
            reply.output = result.map_err(|e| {
                let msg = if e.is_timeout() { "timed out".to_string() } else { e.to_string() };
                // a late or partial reply leaves the stream unusable
                if !matches!(e, WireError::Remote { .. }) {
                    dead = Some(format!("unavailable after: {msg}"));
                    conn.close();
                }
                msg
            });
        }
        if replies.send(reply).is_err() {
            break;
        }
    }
    conn.close();
}

fn handshake(
    worker: usize,
    addr: &str,
    program: Option<&TensorProgram>,
    timeout: Duration,
    stats: &mut CommStats,
) -> Result<(Conn, HelloReply), RuntimeError> {
    let wrap = |source| RuntimeError::Worker { worker, addr: addr.to_string(), source };
    let mut conn = Conn::connect(addr, timeout).map_err(wrap)?;
    let sent = match program {
        Some(p) => {
            let (manifest, blob) = encode_program(p);
            let json = serde_json::to_vec(&manifest).map_err(|e| RuntimeError::Setup(e.to_string()))?;
            conn.send(MsgType::LoadProgram, wire::encode_load_program(&json, &blob)).map_err(wrap)?
        }
        None => conn.send(MsgType::Hello, wire::encode_hello_request()).map_err(wrap)?,
    };
    stats.record(0, worker + 1, sent);
    let frame = conn.recv().map_err(wrap)?;
    stats.record(worker + 1, 0, frame.wire_len() as u64);
    stats.setup_bytes += sent + frame.wire_len() as u64;
    let hello = wire::decode_hello_reply(&frame.expect(MsgType::Hello).map_err(wrap)?).map_err(wrap)?;
    if hello.output_width == 0 {
        return Err(RuntimeError::Setup(format!("worker {worker} ({addr}) has no program")));
    }
    Ok((conn, hello))
}

/// Runs every image through all workers and applies `fc` to the outputs
/// concatenated in worker order. With `programs`, worker `i` is first sent
/// `programs[i]`; otherwise each worker serves whatever it already holds.
pub fn run_nonn(
    workers: &[String],
    programs: Option<&[TensorProgram]>,
    fc: &FcHead,
    images: &ImageSet,
    opts: NonnOptions,
) -> Result<NonnRun, RuntimeError> {
    if workers.is_empty() {
        return Err(RuntimeError::Setup("no workers".into()));
    }
    if let Some(p) = programs {
        if p.len() != workers.len() {
            return Err(RuntimeError::Setup(format!("{} programs for {} workers", p.len(), workers.len())));
        }
    }
    let k = workers.len();
    let mut stats = CommStats::with_devices(k + 1);
    let mut conns = Vec::with_capacity(k);
    let mut widths = Vec::with_capacity(k);
    let want = [images.shape.c as u32, images.shape.h as u32, images.shape.w as u32];
    for (i, addr) in workers.iter().enumerate() {
        let (conn, hello) = handshake(i, addr, programs.map(|p| &p[i]), opts.timeout, &mut stats)?;
        if hello.input != want {
            return Err(RuntimeError::Setup(format!("worker {i} expects input {:?}, images are {want:?}", hello.input)));
        }
        widths.push(hello.output_width as usize);
        conns.push(conn);
    }
    let total: usize = widths.iter().sum();
    if total != fc.width {
        return Err(RuntimeError::Setup(format!("workers return {total} values, head expects {}", fc.width)));
    }
    info!("NoNN run: {k} workers, widths {widths:?}, {} images", images.len());

    let (reply_tx, reply_rx) = mpsc::channel();
    let mut job_txs = Vec::with_capacity(k);
    let mut threads = Vec::with_capacity(k);
    for (i, conn) in conns.into_iter().enumerate() {
        let (tx, rx) = mpsc::channel();
        let replies = reply_tx.clone();
        threads.push(thread::spawn(move || link_loop(i, conn, rx, replies)));
        job_txs.push(tx);
    }
    drop(reply_tx);

    let mut offsets = vec![0usize; k + 1];
    for i in 0..k {
        offsets[i + 1] = offsets[i] + widths[i];
    }
    let mut outcomes = Vec::with_capacity(images.len());
    for n in 0..images.len() {
        let payload = Arc::new(wire::encode_infer_request(n as u32, &images.image(n).data));
        for tx in &job_txs {
            tx.send(Job { image: n, payload: Arc::clone(&payload) }).map_err(|_| RuntimeError::Setup("link thread exited".into()))?;
        }
        let mut slots: Vec<Option<Result<Vec<f32>, String>>> = vec![None; k];
        let mut image = ImageComm { image: n, ..ImageComm::default() };
        for _ in 0..k {
            let r = reply_rx.recv().map_err(|_| RuntimeError::Setup("link thread exited".into()))?;
            debug_assert_eq!(r.image, n);
            if let Some(b) = r.sent {
                stats.record(0, r.worker + 1, b);
                image.bytes += b;
                image.messages += 1;
            }
            if let Some(b) = r.received {
                stats.record(r.worker + 1, 0, b);
                image.bytes += b;
                image.messages += 1;
                if r.output.is_ok() {
                    image.response_bytes += b;
                }
            }
            slots[r.worker] = Some(r.output);
        }
        let mut input = vec![0.0f32; total];
        let mut missing = Vec::new();
        let mut errors = Vec::new();
        for (i, slot) in slots.into_iter().enumerate() {
            match slot.expect("one reply per worker") {
                Ok(v) if v.len() == widths[i] => input[offsets[i]..offsets[i + 1]].copy_from_slice(&v),
                Ok(v) => {
                    missing.push(i);
                    errors.push(format!("worker {i} returned {} values, expected {}", v.len(), widths[i]));
                }
                Err(e) => {
                    missing.push(i);
                    errors.push(format!("worker {i}: {e}"));
                }
            }
        }
        stats.response_bytes += image.response_bytes;
        stats.response_payload_bytes += 4 * (total - missing.iter().map(|&i| widths[i]).sum::<usize>()) as u64;
        stats.images.push(image);
        let outcome = if missing.is_empty() || opts.degraded {
            if !missing.is_empty() {
                warn!("image {n}: zero-filling workers {missing:?}");
            }
            ImageOutcome { image: n, prediction: Some(fc.predict(&input)), missing, error: None }
        } else {
            warn!("image {n}: {}", errors.join("; "));
            ImageOutcome { image: n, prediction: None, missing, error: Some(errors.join("; ")) }
        };
        outcomes.push(outcome);
    }
    drop(job_txs);
    for t in threads {
        let _ = t.join();
    }
    Ok(NonnRun { widths, outcomes, stats })
}

/// Single-process reference: the same programs and head, no network.
pub fn reference_nonn(programs: &[TensorProgram], fc: &FcHead, images: &ImageSet) -> Result<Vec<usize>, EngineError> {
    (0..images.len())
        .map(|n| {
            let x = images.image(n);
            let mut cat = Vec::with_capacity(fc.width);
            for p in programs {
                cat.extend(p.infer(&x)?);
            }
            Ok(fc.predict(&cat))
        })
        .collect()
}

/// LAYER_EXCHANGE traffic after one convolution, summed over devices and images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTraffic {
    /// Descriptor layer index.
    pub layer: usize,
    pub name: String,
    pub payload_bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub n_devices: usize,
    pub predictions: Vec<usize>,
    pub outputs: Vec<Vec<f32>>,
    pub layers: Vec<LayerTraffic>,
    pub stats: CommStats,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitOptions {
    pub timeout: Duration,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT }
    }
}

#[derive(Default)]
struct DeviceReport {
    comm: Vec<DeviceComm>,
    layers: BTreeMap<usize, (u64, u64)>,
    per_image_exchange: Vec<(u64, u64, u64)>,
}

struct Peer {
    id: usize,
    writer: BufWriter<TcpStream>,
    inbox: mpsc::Receiver<Result<Frame, WireError>>,
}

fn peer_reader(stream: TcpStream, tx: mpsc::Sender<Result<Frame, WireError>>) {
    let mut r = BufReader::new(stream);
    loop {
        let f = wire::read_frame(&mut r);
        let end = f.is_err();
        if tx.send(f).is_err() || end {
            break;
        }
    }
}

fn encode_peer_hello(id: usize) -> Vec<u8> {
    let mut p = wire::encode_hello_request();
    p.extend_from_slice(&(id as u32).to_le_bytes());
    p
}

/// One device of a horizontal split. Each message is recorded once, by its
/// sender; traffic with the coordinator is recorded by the coordinator.
fn split_device(
    d: usize,
    n: usize,
    listener: TcpListener,
    addrs: Vec<SocketAddr>,
    program: Arc<TensorProgram>,
    timeout: Duration,
) -> Result<DeviceReport, RuntimeError> {
    let setup = |e: WireError| RuntimeError::Setup(format!("device {d}: {e}"));
    let mut report = DeviceReport { comm: vec![DeviceComm::default(); n + 1], ..DeviceReport::default() };
    let me = d + 1;
    let add_peer = |id: usize, stream: TcpStream| -> io::Result<Peer> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(None)?;
        let (tx, rx) = mpsc::channel();
        let rs = stream.try_clone()?;
        thread::spawn(move || peer_reader(rs, tx));
        Ok(Peer { id, writer: BufWriter::new(stream), inbox: rx })
    };
    let mut peers: Vec<Peer> = Vec::with_capacity(n - 1);
    for (e, addr) in addrs.iter().enumerate().take(d) {
        let mut s = TcpStream::connect_timeout(addr, timeout)?;
        let sent = wire::send(&mut s, MsgType::Hello, encode_peer_hello(d)).map_err(setup)? as u64;
        report.comm[me].bytes_sent += sent;
        report.comm[me].messages_sent += 1;
        report.comm[e + 1].bytes_received += sent;
        report.comm[e + 1].messages_received += 1;
        peers.push(add_peer(e, s)?);
    }
    let mut coordinator = None;
    while coordinator.is_none() || peers.len() < n - 1 {
        let (s, _) = listener.accept()?;
        s.set_read_timeout(Some(timeout))?;
        // unbuffered so nothing past the HELLO is consumed
        let f = wire::read_frame(&mut &s).map_err(setup)?;
        let payload = f.expect(MsgType::Hello).map_err(setup)?;
        match payload.len() {
            4 => {
                s.set_read_timeout(None)?;
                coordinator = Some(Conn::new(s)?);
            }
            8 => {
                let id = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes")) as usize;
                peers.push(add_peer(id, s)?);
            }
            _ => return Err(RuntimeError::Setup(format!("device {d}: malformed HELLO"))),
        }
    }
    peers.sort_by_key(|p| p.id);
    let mut coordinator = coordinator.expect("accepted");
    coordinator.send(MsgType::Hello, wire::encode_hello_reply(&hello_for(Some(&program)))).map_err(setup)?;

    loop {
        let frame = match coordinator.recv() {
            Ok(f) => f,
            Err(WireError::Closed) => break,
            Err(e) => return Err(setup(e)),
        };
        match frame.kind() {
            Some(MsgType::InferReq) => {}
            Some(MsgType::Shutdown) => break,
            _ => {
                coordinator
                    .send(MsgType::Error, wire::encode_error(error_code::UNEXPECTED, "split device accepts INFER_REQ and SHUTDOWN"))
                    .map_err(setup)?;
                continue;
            }
        }
        let (_, pixels) = wire::decode_infer_request(&frame.payload).map_err(setup)?;
        let input = Tensor::new(program.input_shape(), pixels).map_err(|e| RuntimeError::Setup(e.to_string()))?;
        let mut image_exchange = (0u64, 0u64, 0u64);
        let mut counter = OpCounter::default();
        let result = program.run(&input, &mut counter, &mut |layer, conv, x, counter| {
            let step = conv.out_ch / n;
            let local = conv.forward_channels(x, d * step, (d + 1) * step, counter);
            if n == 1 {
                return Ok(local);
            }
            let payload = wire::f32s_to_bytes(&local.data);
            let entry = report.layers.entry(layer).or_default();
            for p in peers.iter_mut() {
                let sent = wire::send(&mut p.writer, MsgType::LayerExchange, payload.clone())
                    .map_err(|e| EngineError::Hook(format!("peer {}: {e}", p.id)))? as u64;
                entry.0 += payload.len() as u64;
                entry.1 += 1;
                image_exchange.0 += payload.len() as u64;
                image_exchange.1 += sent;
                image_exchange.2 += 1;
                report.comm[me].bytes_sent += sent;
                report.comm[me].messages_sent += 1;
                report.comm[p.id + 1].bytes_received += sent;
                report.comm[p.id + 1].messages_received += 1;
            }
            let mut parts: Vec<Option<Tensor>> = vec![None; n];
            for p in peers.iter() {
                let f = match p.inbox.recv_timeout(timeout) {
                    Ok(Ok(f)) => f,
                    Ok(Err(e)) => return Err(EngineError::Hook(format!("peer {}: {e}", p.id))),
                    Err(_) => return Err(EngineError::Hook(format!("peer {} timed out", p.id))),
                };
                let data = f
                    .expect(MsgType::LayerExchange)
                    .and_then(|b| wire::bytes_to_f32s("LAYER_EXCHANGE", &b))
                    .map_err(|e| EngineError::Hook(format!("peer {}: {e}", p.id)))?;
                parts[p.id] = Some(Tensor::new(local.shape, data).map_err(|e| EngineError::Hook(format!("peer {}: {e}", p.id)))?);
            }
            parts[d] = Some(local);
            let parts: Vec<Tensor> = parts.into_iter().map(|t| t.expect("every slice present")).collect();
            Ok(Tensor::concat_channels(&parts))
        });
        report.per_image_exchange.push(image_exchange);
        let failed = result.is_err();
        let (t, payload) = match result {
            Ok(out) => (MsgType::InferResp, wire::f32s_to_bytes(&out)),
            Err(e) => (MsgType::Error, wire::encode_error(error_code::INFERENCE, &e.to_string())),
        };
        coordinator.send(t, payload).map_err(setup)?;
        if failed {
            break;
        }
    }
    coordinator.close();
    for p in &peers {
        let _ = p.writer.get_ref().shutdown(Shutdown::Both);
    }
    Ok(report)
}

/// Splits every convolution's output channels evenly over `n_devices`
/// threads connected by a localhost TCP mesh. After each convolution, every
/// device sends its slice to every other device.
pub fn run_horizontal_split(program: &TensorProgram, n_devices: usize, images: &ImageSet, opts: SplitOptions) -> Result<SplitRun, RuntimeError> {
    if n_devices == 0 {
        return Err(RuntimeError::Setup("need at least one device".into()));
    }
    for (layer, shape) in program.conv_layers() {
        if shape.c % n_devices != 0 {
            return Err(RuntimeError::Indivisible { layer, out_ch: shape.c, n_devices });
        }
    }
    if images.shape != program.input_shape() {
        return Err(RuntimeError::Setup(format!("images are {:?}, program expects {:?}", images.shape, program.input_shape())));
    }
    let program = Arc::new(program.clone());
    let listeners: Vec<TcpListener> = (0..n_devices).map(|_| TcpListener::bind("127.0.0.1:0")).collect::<io::Result<_>>()?;
    let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr()).collect::<io::Result<_>>()?;
    let mut threads = Vec::with_capacity(n_devices);
    for (d, l) in listeners.into_iter().enumerate() {
        let (addrs, program, timeout) = (addrs.clone(), Arc::clone(&program), opts.timeout);
        threads.push(thread::spawn(move || split_device(d, n_devices, l, addrs, program, timeout)));
    }

    let mut stats = CommStats::with_devices(n_devices + 1);
    let run = (|| -> Result<(Vec<usize>, Vec<Vec<f32>>), RuntimeError> {
        let mut conns = Vec::with_capacity(n_devices);
        for (d, addr) in addrs.iter().enumerate() {
            let wrap = |source| RuntimeError::Worker { worker: d, addr: addr.to_string(), source };
            let mut c = Conn::connect(&addr.to_string(), opts.timeout).map_err(wrap)?;
            let sent = c.send(MsgType::Hello, wire::encode_hello_request()).map_err(wrap)?;
            stats.record(0, d + 1, sent);
            let f = c.recv().map_err(wrap)?;
            stats.record(d + 1, 0, f.wire_len() as u64);
            stats.setup_bytes += sent + f.wire_len() as u64;
            f.expect(MsgType::Hello).map_err(wrap)?;
            conns.push(c);
        }
        let mut predictions = Vec::with_capacity(images.len());
        let mut outputs = Vec::with_capacity(images.len());
        for n in 0..images.len() {
            let payload = wire::encode_infer_request(n as u32, &images.image(n).data);
            let mut image = ImageComm { image: n, ..ImageComm::default() };
            for (d, c) in conns.iter_mut().enumerate() {
                let sent = c.send(MsgType::InferReq, payload.clone()).map_err(|source| RuntimeError::Worker {
                    worker: d,
                    addr: addrs[d].to_string(),
                    source,
                })?;
                stats.record(0, d + 1, sent);
                image.bytes += sent;
                image.messages += 1;
            }
            let mut first: Option<Vec<f32>> = None;
            for (d, c) in conns.iter_mut().enumerate() {
                let wrap = |source| RuntimeError::Worker { worker: d, addr: addrs[d].to_string(), source };
                let f = c.recv().map_err(wrap)?;
                let b = f.wire_len() as u64;
                stats.record(d + 1, 0, b);
                image.bytes += b;
                image.messages += 1;
                image.response_bytes += b;
                let out = wire::bytes_to_f32s("INFER_RESP", &f.expect(MsgType::InferResp).map_err(wrap)?).map_err(wrap)?;
                stats.response_payload_bytes += 4 * out.len() as u64;
                match &first {
                    None => first = Some(out),
                    Some(o) if o.iter().map(|v| v.to_bits()).eq(out.iter().map(|v| v.to_bits())) => {}
                    Some(_) => return Err(RuntimeError::Image { image: n, reason: format!("device {d} disagrees with device 0") }),
                }
            }
            let out = first.expect("at least one device");
            stats.response_bytes += image.response_bytes;
            stats.images.push(image);
            predictions.push(argmax(&out));
            outputs.push(out);
        }
        for (d, c) in conns.iter_mut().enumerate() {
            if let Ok(sent) = c.send(MsgType::Shutdown, Vec::new()) {
                stats.record(0, d + 1, sent);
                stats.setup_bytes += sent;
            }
        }
        Ok((predictions, outputs))
    })();

    let mut layers: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let mut device_error = None;
    for t in threads {
        match t.join() {
            Ok(Ok(report)) => {
                for (dst, src) in stats.devices.iter_mut().zip(&report.comm) {
                    dst.bytes_sent += src.bytes_sent;
                    dst.bytes_received += src.bytes_received;
                    dst.messages_sent += src.messages_sent;
                    dst.messages_received += src.messages_received;
                }
                for (layer, (bytes, msgs)) in report.layers {
                    let e = layers.entry(layer).or_default();
                    e.0 += bytes;
                    e.1 += msgs;
                }
                for (img, (payload, wire_bytes, msgs)) in report.per_image_exchange.into_iter().enumerate() {
                    if let Some(i) = stats.images.get_mut(img) {
                        i.exchange_payload_bytes += payload;
                        i.bytes += wire_bytes;
                        i.messages += msgs;
                    }
                    stats.layer_exchange_payload_bytes += payload;
                    stats.layer_exchange_messages += msgs;
                }
            }
            Ok(Err(e)) => device_error = Some(e),
            Err(_) => device_error = Some(RuntimeError::Setup("device thread panicked".into())),
        }
    }
    let (predictions, outputs) = match (run, device_error) {
        (Ok(r), None) => r,
        (Err(e), _) | (Ok(_), Some(e)) => return Err(e),
    };
    let layers = layers
        .into_iter()
        .map(|(layer, (payload_bytes, messages))| LayerTraffic {
            layer,
            name: program.descriptor().layers[layer].name.clone(),
            payload_bytes,
            messages,
        })
        .collect();
    Ok(SplitRun { n_devices, predictions, outputs, layers, stats })
}
