//! Flaky HTTP origin for exercising the harvester.
//!
//! Serves `/playlist.txt` (one `#EXTINF` + segment name per entry) and the
//! segments themselves. A seeded fraction of requests fail with a 500, 503,
//! 429 or a dropped connection, and every injected fault is recorded.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::FailureKind;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    Status500,
    Status503,
    Status429,
    Status404,
    Drop,
}

impl InjectedFault {
    pub fn kind(self) -> FailureKind {
        match self {
            Self::Status500 | Self::Status503 => FailureKind::Server,
            Self::Status429 | Self::Status404 => FailureKind::Client,
            Self::Drop => FailureKind::Network,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OriginConfig {
    /// Segment name → bytes, served in name order by the playlist.
    pub segments: BTreeMap<String, Vec<u8>>,
    /// Announced duration per segment in the playlist.
    pub segment_duration: f64,
    pub failure_rate: f64,
    pub seed: u64,
    /// Faults drawn uniformly when a request is chosen to fail.
    pub fault_mix: Vec<InjectedFault>,
    /// Fail every request with this status instead of serving content.
    pub always_status: Option<u16>,
}

impl OriginConfig {
    pub fn new(segments: BTreeMap<String, Vec<u8>>, segment_duration: f64) -> Self {
        Self {
            segments,
            segment_duration,
            failure_rate: 0.0,
            seed: 0,
            fault_mix: vec![
                InjectedFault::Status500,
                InjectedFault::Status503,
                InjectedFault::Status429,
                InjectedFault::Drop,
            ],
            always_status: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestLog {
    pub path: String,
    pub fault: Option<InjectedFault>,
}

struct Shared {
    cfg: OriginConfig,
    rng: Mutex<ChaCha8Rng>,
    log: Mutex<Vec<RequestLog>>,
}

pub struct FlakyOrigin {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FlakyOrigin {
    pub fn start(cfg: OriginConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            rng: Mutex::new(util::rng(cfg.seed)),
            cfg,
            log: Mutex::new(Vec::new()),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = stream {
                        let _ = serve(&shared, stream);
                    }
                }
            })
        };
        Ok(Self {
            addr,
            shared,
            stop,
            handle: Some(handle),
        })
    }

    pub fn playlist_url(&self) -> String {
        format!("http://{}/playlist.txt", self.addr)
    }

    pub fn requests(&self) -> Vec<RequestLog> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn injected_faults(&self) -> Vec<InjectedFault> {
        self.requests().into_iter().filter_map(|r| r.fault).collect()
    }
}

impl Drop for FlakyOrigin {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(shared: &Shared, mut stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let cfg = &shared.cfg;

    let fault = {
        let mut rng = shared.rng.lock().unwrap();
        if rng.random::<f64>() < cfg.failure_rate && !cfg.fault_mix.is_empty() {
            Some(cfg.fault_mix[rng.random_range(0..cfg.fault_mix.len())])
        } else {
            None
        }
    };
    shared.log.lock().unwrap().push(RequestLog {
        path: path.clone(),
        fault,
    });

    if let Some(code) = cfg.always_status {
        return respond(&mut stream, code, b"forced failure");
    }
    match fault {
        Some(InjectedFault::Drop) => {
            stream.shutdown(Shutdown::Both)?;
            return Ok(());
        }
        Some(InjectedFault::Status500) => return respond(&mut stream, 500, b"boom"),
        Some(InjectedFault::Status503) => return respond(&mut stream, 503, b"busy"),
        Some(InjectedFault::Status429) => return respond(&mut stream, 429, b"slow down"),
        Some(InjectedFault::Status404) => return respond(&mut stream, 404, b"gone"),
        None => {}
    }

    if path == "/playlist.txt" {
        let mut body = String::new();
        for name in cfg.segments.keys() {
            body.push_str(&format!("#EXTINF:{},\n{name}\n", cfg.segment_duration));
        }
        return respond(&mut stream, 200, body.as_bytes());
    }
    match cfg.segments.get(path.trim_start_matches('/')) {
        Some(bytes) => respond(&mut stream, 200, bytes),
        None => respond(&mut stream, 404, b"not found"),
    }
}

fn respond(stream: &mut TcpStream, code: u16, body: &[u8]) -> std::io::Result<()> {
    let reason = match code {
        200 => "OK",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let head = format!(
        "HTTP/1.1 {code} {reason}\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()?;
    let _ = stream.shutdown(Shutdown::Write);
    Ok(())
}
