//! Confidence oracle: line-delimited JSON over TCP or subprocess pipes, plus
//! an in-process synthetic oracle driven by planted patches.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::curves::PerturbationMode;
use crate::error::{Error, Result};

/// Env var consulted when no endpoint is given on the command line.
pub const ORACLE_ENV: &str = "GLIMPSE_ORACLE";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Floor inside the synthetic log-likelihood so full deletion stays finite.
pub const SYNTH_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub id: u64,
    pub trace_id: String,
    pub mode: PerturbationMode,
    pub patch_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    #[serde(default)]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_log_likelihood: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl OracleResponse {
    fn ok(id: u64, v: f64) -> Self {
        OracleResponse {
            id: Some(id),
            mean_log_likelihood: Some(v),
            error: None,
        }
    }

    fn err(id: Option<u64>, msg: impl Into<String>) -> Self {
        OracleResponse {
            id,
            mean_log_likelihood: None,
            error: Some(msg.into()),
        }
    }
}

pub trait ConfidenceOracle {
    /// Mean self-log-likelihood of the answer under the perturbed image.
    fn query(&mut self, request: &OracleRequest) -> Result<f64>;
}

/// Wraps a closure; handy for calibration tests.
pub struct FnOracle<F>(F);

impl<F: FnMut(&OracleRequest) -> f64> FnOracle<F> {
    pub fn new(f: F) -> Self {
        FnOracle(f)
    }
}

impl<F: FnMut(&OracleRequest) -> f64> ConfidenceOracle for FnOracle<F> {
    fn query(&mut self, request: &OracleRequest) -> Result<f64> {
        Ok((self.0)(request))
    }
}

/// Likelihood depends only on how much planted mass the perturbed image keeps:
/// `ln(eps + (1 - eps) * retained)`.
#[derive(Debug, Clone, Default)]
pub struct SyntheticOracle {
    traces: Arc<HashMap<String, (usize, HashSet<usize>)>>,
}

impl SyntheticOracle {
    pub fn new<I: IntoIterator<Item = (String, usize, Vec<usize>)>>(traces: I) -> Self {
        let map = traces
            .into_iter()
            .map(|(id, k, planted)| (id, (k, planted.into_iter().collect())))
            .collect();
        SyntheticOracle { traces: Arc::new(map) }
    }

    pub fn answer(&self, req: &OracleRequest) -> Result<f64> {
        let (k, planted) = self
            .traces
            .get(&req.trace_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trace {:?}", req.trace_id)))?;
        check_indices(&req.patch_indices, *k)?;
        if planted.is_empty() {
            return Err(Error::InvalidArgument(format!("trace {:?} has no planted patches", req.trace_id)));
        }
        let hit = req.patch_indices.iter().filter(|p| planted.contains(p)).count() as f64;
        let frac = hit / planted.len() as f64;
        let retained = match req.mode {
            PerturbationMode::Deletion => 1.0 - frac,
            PerturbationMode::Insertion => frac,
        };
        Ok((SYNTH_EPSILON + (1.0 - SYNTH_EPSILON) * retained).ln())
    }
}

impl ConfidenceOracle for SyntheticOracle {
    fn query(&mut self, request: &OracleRequest) -> Result<f64> {
        self.answer(request)
    }
}

/// Indices must lie in `[0, k)` without repeats.
pub fn check_indices(indices: &[usize], k: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &p in indices {
        if p >= k {
            return Err(Error::InvalidArgument(format!("patch index {p} out of range for K={k}")));
        }
        if !seen.insert(p) {
            return Err(Error::InvalidArgument(format!("duplicate patch index {p}")));
        }
    }
    Ok(())
}

/// Where to reach an external oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleEndpoint {
    Tcp(String),
    Exec(String),
}

impl OracleEndpoint {
    /// Accepts `host:port`, `tcp://host:port` or `exec:<command line>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(Error::InvalidArgument("empty exec: command".into()));
            }
            return Ok(OracleEndpoint::Exec(cmd.trim().to_string()));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(OracleEndpoint::Tcp(addr.to_string()))
            }
            _ => Err(Error::InvalidArgument(format!("bad oracle endpoint {s:?}"))),
        }
    }

    pub fn connect(&self, timeout: Duration) -> Result<Box<dyn ConfidenceOracle + Send>> {
        Ok(match self {
            OracleEndpoint::Tcp(addr) => Box::new(TcpOracle::new(addr.clone(), timeout)),
            OracleEndpoint::Exec(cmd) => Box::new(ProcessOracle::spawn(cmd, timeout)?),
        })
    }
}

fn decode(line: &str, id: u64) -> Result<Option<f64>> {
    let resp: OracleResponse =
        serde_json::from_str(line).map_err(|e| Error::OracleMalformed(format!("{e}: {line:?}")))?;
    if resp.id != Some(id) {
        // stale answer to an earlier, timed-out attempt
        return Ok(None);
    }
    if let Some(msg) = resp.error {
        return Err(Error::OracleMalformed(format!("oracle error for request {id}: {msg}")));
    }
    resp.mean_log_likelihood
        .map(Some)
        .ok_or_else(|| Error::OracleMalformed(format!("response {id} lacks mean_log_likelihood")))
}

fn encode(req: &OracleRequest) -> String {
    let mut line = serde_json::to_string(req).expect("request serializes");
    line.push('\n');
    line
}

/// One connection per client; reconnects once on failure.
pub struct TcpOracle {
    addr: String,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
}

impl TcpOracle {
    pub fn new(addr: String, timeout: Duration) -> Self {
        TcpOracle {
            addr,
            timeout,
            conn: None,
        }
    }

    fn connect(&mut self) -> std::io::Result<&mut (BufReader<TcpStream>, TcpStream)> {
        if self.conn.is_none() {
            let mut last = None;
            let mut stream = None;
            for a in self.addr.to_socket_addrs()? {
                match TcpStream::connect_timeout(&a, self.timeout) {
                    Ok(s) => {
                        stream = Some(s);
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            let stream = stream.ok_or_else(|| {
                last.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))
            })?;
            stream.set_read_timeout(Some(self.timeout))?;
            stream.set_write_timeout(Some(self.timeout))?;
            stream.set_nodelay(true)?;
            self.conn = Some((BufReader::new(stream.try_clone()?), stream));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    fn attempt(&mut self, req: &OracleRequest) -> std::result::Result<f64, AttemptError> {
        let deadline = Instant::now() + self.timeout;
        let (reader, writer) = self.connect().map_err(AttemptError::Transport)?;
        writer.write_all(encode(req).as_bytes()).map_err(AttemptError::Transport)?;
        loop {
            let mut line = String::new();
            let n = reader.read_line(&mut line).map_err(AttemptError::Transport)?;
            if n == 0 {
                return Err(AttemptError::Transport(std::io::ErrorKind::UnexpectedEof.into()));
            }
            if let Some(v) = decode(&line, req.id).map_err(AttemptError::Protocol)? {
                return Ok(v);
            }
            if Instant::now() > deadline {
                return Err(AttemptError::Transport(std::io::ErrorKind::TimedOut.into()));
            }
        }
    }
}

enum AttemptError {
    Transport(std::io::Error),
    Protocol(Error),
}

impl ConfidenceOracle for TcpOracle {
    fn query(&mut self, request: &OracleRequest) -> Result<f64> {
        let mut last = String::new();
        for _ in 0..2 {
            match self.attempt(request) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Protocol(e)) => return Err(e),
                Err(AttemptError::Transport(e)) => {
                    log::warn!("oracle {}: {e}", self.addr);
                    last = e.to_string();
                    self.conn = None;
                }
            }
        }
        Err(Error::OracleUnavailable(format!("{} ({last})", self.addr)))
    }
}

/// Talks to a child process over stdin/stdout.
pub struct ProcessOracle {
    command: String,
    timeout: Duration,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl ProcessOracle {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty oracle command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::OracleUnavailable(format!("cannot spawn {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessOracle {
            command: command.to_string(),
            timeout,
            child,
            stdin,
            lines: rx,
        })
    }

    fn attempt(&mut self, req: &OracleRequest) -> std::result::Result<f64, AttemptError> {
        let deadline = Instant::now() + self.timeout;
        self.stdin
            .write_all(encode(req).as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(AttemptError::Transport)?;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(line) => line.map_err(AttemptError::Transport)?,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(AttemptError::Transport(std::io::ErrorKind::TimedOut.into()))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(AttemptError::Transport(std::io::ErrorKind::UnexpectedEof.into()))
                }
            };
            if let Some(v) = decode(&line, req.id).map_err(AttemptError::Protocol)? {
                return Ok(v);
            }
        }
    }
}

impl ConfidenceOracle for ProcessOracle {
    fn query(&mut self, request: &OracleRequest) -> Result<f64> {
        let mut last = String::new();
        for _ in 0..2 {
            match self.attempt(request) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Protocol(e)) => return Err(e),
                Err(AttemptError::Transport(e)) => {
                    log::warn!("oracle {:?}: {e}", self.command);
                    last = e.to_string();
                }
            }
        }
        Err(Error::OracleUnavailable(format!("{:?} ({last})", self.command)))
    }
}

impl Drop for ProcessOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Answers one request line. Errors go back to the caller as `{id, error}`.
pub fn answer_line(oracle: &SyntheticOracle, line: &str) -> OracleResponse {
    match serde_json::from_str::<OracleRequest>(line) {
        Ok(req) => match oracle.answer(&req) {
            Ok(v) => OracleResponse::ok(req.id, v),
            Err(e) => OracleResponse::err(Some(req.id), e.to_string()),
        },
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            OracleResponse::err(id, format!("bad request: {e}"))
        }
    }
}

/// Serves requests from `input` until EOF.
pub fn serve_lines<R: BufRead, W: Write>(oracle: &SyntheticOracle, input: R, mut output: W) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = answer_line(oracle, &line);
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(oracle: SyntheticOracle, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let oracle = oracle.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return log::warn!("oracle connection: {e}"),
            };
            if let Err(e) = serve_lines(&oracle, reader, stream) {
                log::warn!("oracle connection: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> SyntheticOracle {
        SyntheticOracle::new([("t".to_string(), 8, vec![1, 2, 3, 4])])
    }

    fn req(mode: PerturbationMode, idx: &[usize]) -> OracleRequest {
        OracleRequest {
            id: 7,
            trace_id: "t".into(),
            mode,
            patch_indices: idx.to_vec(),
        }
    }

    #[test]
    fn synthetic_likelihood() {
        let o = synth();
        let del = |i: &[usize]| o.answer(&req(PerturbationMode::Deletion, i)).unwrap();
        let ins = |i: &[usize]| o.answer(&req(PerturbationMode::Insertion, i)).unwrap();
        assert_eq!(del(&[]), 0.0);
        assert_eq!(del(&[0, 5]), 0.0);
        assert!((del(&[1, 2]) - (0.001f64 + 0.999 * 0.5).ln()).abs() < 1e-15);
        assert!((ins(&[]) - 0.001f64.ln()).abs() < 1e-15);
        assert_eq!(ins(&[1, 2, 3, 4]), 0.0);
        assert!(o.answer(&req(PerturbationMode::Deletion, &[8])).is_err());
        assert!(o.answer(&req(PerturbationMode::Deletion, &[1, 1])).is_err());
    }

    #[test]
    fn wire_format() {
        let r = req(PerturbationMode::Insertion, &[3, 1]);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"id":7,"trace_id":"t","mode":"insert","patch_indices":[3,1]}"#);
        let resp = answer_line(&synth(), &s);
        let s = serde_json::to_string(&resp).unwrap();
        assert!(s.starts_with(r#"{"id":7,"mean_log_likelihood":"#));
        let bad = answer_line(&synth(), r#"{"id":3,"mode":"sideways"}"#);
        assert_eq!(bad.id, Some(3));
        assert!(bad.error.is_some());
    }

    #[test]
    fn endpoints() {
        assert_eq!(
            OracleEndpoint::parse("tcp://127.0.0.1:9000").unwrap(),
            OracleEndpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            OracleEndpoint::parse("localhost:1").unwrap(),
            OracleEndpoint::Tcp("localhost:1".into())
        );
        assert_eq!(
            OracleEndpoint::parse("exec:python oracle.py").unwrap(),
            OracleEndpoint::Exec("python oracle.py".into())
        );
        assert!(OracleEndpoint::parse("nonsense").is_err());
        assert!(OracleEndpoint::parse("exec:").is_err());
    }

    #[test]
    fn tcp_round_trip_skips_stale_ids() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut w = stream.try_clone().unwrap();
            let mut line = String::new();
            BufReader::new(stream).read_line(&mut line).unwrap();
            w.write_all(b"{\"id\":99,\"mean_log_likelihood\":-9.0}\n").unwrap();
            w.write_all(b"{\"id\":7,\"mean_log_likelihood\":-0.25}\n").unwrap();
        });
        let mut o = TcpOracle::new(addr, Duration::from_secs(5));
        assert_eq!(o.query(&req(PerturbationMode::Deletion, &[])).unwrap(), -0.25);
    }

    #[test]
    fn dead_tcp_endpoint_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let mut o = TcpOracle::new(addr, Duration::from_millis(200));
        let t0 = Instant::now();
        let err = o.query(&req(PerturbationMode::Deletion, &[])).unwrap_err();
        assert!(matches!(err, Error::OracleUnavailable(_)));
        assert!(t0.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let hold = thread::spawn(move || {
            let a = listener.accept().unwrap();
            let b = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(800));
            drop((a, b));
        });
        let mut o = TcpOracle::new(addr, Duration::from_millis(150));
        let err = o.query(&req(PerturbationMode::Deletion, &[])).unwrap_err();
        assert!(matches!(err, Error::OracleUnavailable(_)));
        hold.join().unwrap();
    }

    #[test]
    fn error_response_is_malformed() {
        let err = decode(r#"{"id":7,"error":"boom"}"#, 7).unwrap_err();
        assert!(matches!(err, Error::OracleMalformed(_)));
        assert!(decode("not json", 7).is_err());
        assert_eq!(decode(r#"{"id":7,"mean_log_likelihood":-1.5}"#, 7).unwrap(), Some(-1.5));
    }
}
