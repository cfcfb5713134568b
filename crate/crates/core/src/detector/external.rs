//! Line-delimited JSON protocol for detectors and scorers living in another
//! process or behind HTTP.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use super::{Detector, DetectorError, DetectorHandle, ScoreOutput, Sign};
use crate::schema::SCHEMA_VERSION;
use crate::scoring::{ScoreError, TokenScore, TokenScorer};

pub const DEFAULT_EXTERNAL_TIMEOUT_MS: u64 = 30_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Handshake {
    pub name: String,
    pub sign: Sign,
}

pub fn parse_handshake(line: &str) -> Result<Handshake, DetectorError> {
    #[derive(Deserialize)]
    struct Raw {
        protocol: String,
        name: String,
        sign: String,
    }
    let raw: Raw = serde_json::from_str(line.trim())
        .map_err(|e| DetectorError::Protocol(format!("bad handshake {:?}: {e}", truncate(line))))?;
    if raw.protocol != SCHEMA_VERSION {
        return Err(DetectorError::Protocol(format!(
            "handshake protocol {:?}, expected {SCHEMA_VERSION:?}",
            raw.protocol
        )));
    }
    let sign = raw.sign.parse().map_err(DetectorError::Protocol)?;
    Ok(Handshake { name: raw.name, sign })
}

/// One request line, keys in wire order.
pub fn request_line(method: &str, id: &str, text: &str) -> String {
    let q = |s: &str| Value::from(s).to_string();
    format!(
        "{{\"jsonrpc-like\":{},\"method\":{},\"id\":{},\"text\":{}}}",
        q(SCHEMA_VERSION),
        q(method),
        q(id),
        q(text)
    )
}

fn truncate(s: &str) -> String {
    let mut out: String = s.chars().take(120).collect();
    if out.len() < s.len() {
        out.push_str("...");
    }
    out
}

/// Parses a reply object and checks its id. Non-finite values arrive as bare
/// `NaN`/`Infinity` tokens (not valid JSON), strings, or `null`.
fn parse_reply(line: &str, expected_id: &str) -> Result<serde_json::Map<String, Value>, DetectorError> {
    let value: Value = match serde_json::from_str(line.trim()) {
        Ok(v) => v,
        Err(e) => {
            let lower = line.to_ascii_lowercase();
            if lower.contains("nan") || lower.contains("infinity") {
                return Err(DetectorError::NonFinite);
            }
            return Err(DetectorError::Protocol(format!("malformed reply {:?}: {e}", truncate(line))));
        }
    };
    let Value::Object(obj) = value else {
        return Err(DetectorError::Protocol(format!("reply is not an object: {:?}", truncate(line))));
    };
    match obj.get("id").and_then(Value::as_str) {
        Some(id) if id == expected_id => {}
        Some(id) => return Err(DetectorError::Protocol(format!("reply id {id:?} does not match {expected_id:?}"))),
        None => return Err(DetectorError::Protocol("reply has no string id".into())),
    }
    if let Some(err) = obj.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Err(DetectorError::Remote(msg));
    }
    Ok(obj)
}

pub fn parse_score_reply(line: &str, expected_id: &str) -> Result<ScoreOutput, DetectorError> {
    let obj = parse_reply(line, expected_id)?;
    let score = match obj.get("score") {
        Some(Value::Number(n)) => n.as_f64().ok_or(DetectorError::NonFinite)?,
        Some(Value::String(s)) if s.parse::<f64>().is_ok_and(|x| !x.is_finite()) => {
            return Err(DetectorError::NonFinite)
        }
        Some(Value::Null) => return Err(DetectorError::NonFinite),
        Some(other) => return Err(DetectorError::Protocol(format!("score is not a number: {other}"))),
        None => return Err(DetectorError::Protocol("reply has neither score nor error".into())),
    };
    if !score.is_finite() {
        return Err(DetectorError::NonFinite);
    }
    let mut out = ScoreOutput::new(score);
    match obj.get("gpu_peak_gib") {
        None | Some(Value::Null) => {}
        Some(v) => {
            out.gpu_peak_gib = Some(
                v.as_f64()
                    .filter(|g| g.is_finite() && *g >= 0.0)
                    .ok_or_else(|| DetectorError::Protocol(format!("bad gpu_peak_gib {v}")))?,
            )
        }
    }
    Ok(out)
}

pub fn parse_tokens_reply(line: &str, expected_id: &str) -> Result<Vec<TokenScore>, DetectorError> {
    let obj = parse_reply(line, expected_id)?;
    let tokens: Vec<TokenScore> = obj
        .get("tokens")
        .ok_or_else(|| DetectorError::Protocol("reply has neither tokens nor error".into()))
        .and_then(|v| {
            serde_json::from_value(v.clone()).map_err(|e| DetectorError::Protocol(format!("bad tokens: {e}")))
        })?;
    for t in &tokens {
        if !(t.logprob.is_finite() && t.logprob <= 0.0 && t.rank >= 1 && t.entropy.is_finite() && t.entropy >= 0.0) {
            return Err(DetectorError::Protocol(format!("token statistics out of range: {t:?}")));
        }
    }
    Ok(tokens)
}

struct Conn {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Conn {
    fn spawn(command: &[String], timeout: Duration) -> Result<(Conn, Handshake), DetectorError> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| DetectorError::Process(format!("spawning {:?}: {e}", command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let program = command[0].clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                log::debug!("[{program}] {line}");
            }
        });
        let mut conn = Conn { child, stdin, lines };
        let first = conn.recv(timeout)?;
        let handshake = parse_handshake(&first)?;
        Ok((conn, handshake))
    }

    fn recv(&mut self, timeout: Duration) -> Result<String, DetectorError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(DetectorError::Process(format!("reading stdout: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(DetectorError::Timeout(timeout.as_millis() as u64)),
            Err(RecvTimeoutError::Disconnected) => Err(DetectorError::Process("process closed its stdout".into())),
        }
    }

    fn call(&mut self, line: &str, timeout: Duration) -> Result<String, DetectorError> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| DetectorError::Process(format!("writing request: {e}")))?;
        self.recv(timeout)
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A small pool of child processes. A connection that times out or desyncs is
/// dropped and respawned on next use.
struct ProcessPool {
    command: Vec<String>,
    timeout: Duration,
    expected: Handshake,
    slots: Vec<Mutex<Option<Conn>>>,
    next: AtomicUsize,
}

impl ProcessPool {
    fn start(command: Vec<String>, timeout: Duration, size: usize) -> Result<(Self, Handshake), DetectorError> {
        let (first, handshake) = Conn::spawn(&command, timeout)?;
        let mut slots = vec![Mutex::new(Some(first))];
        slots.extend((1..size.max(1)).map(|_| Mutex::new(None)));
        let pool = ProcessPool { command, timeout, expected: handshake.clone(), slots, next: AtomicUsize::new(0) };
        Ok((pool, handshake))
    }

    fn call(&self, line: &str, id: &str) -> Result<String, DetectorError> {
        let slot = &self.slots[self.next.fetch_add(1, Ordering::Relaxed) % self.slots.len()];
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            let (conn, hs) = Conn::spawn(&self.command, self.timeout)?;
            if hs != self.expected {
                return Err(DetectorError::Protocol(format!("respawned detector changed handshake to {hs:?}")));
            }
            *guard = Some(conn);
        }
        let conn = guard.as_mut().expect("connection present");
        let result = conn.call(line, self.timeout);
        let desync = match &result {
            Err(_) => true,
            Ok(reply) => serde_json::from_str::<Value>(reply)
                .ok()
                .and_then(|v| v.get("id").and_then(Value::as_str).map(|r| r != id))
                .unwrap_or(false),
        };
        if desync {
            *guard = None;
        }
        result
    }
}

enum Transport {
    Process(ProcessPool),
    Http { client: reqwest::blocking::Client, url: String },
}

impl Transport {
    fn http(url: &str, timeout_ms: u64) -> Result<Self, DetectorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| DetectorError::Transport(e.to_string()))?;
        Ok(Transport::Http { client, url: format!("{}/v1/score", url.trim_end_matches('/')) })
    }

    fn call(&self, line: &str, id: &str) -> Result<String, DetectorError> {
        match self {
            Transport::Process(pool) => pool.call(line, id),
            Transport::Http { client, url } => {
                let resp = client
                    .post(url)
                    .header("content-type", "application/json")
                    .body(line.to_string())
                    .send()
                    .map_err(|e| {
                        if e.is_timeout() {
                            DetectorError::Timeout(0)
                        } else {
                            DetectorError::Transport(e.to_string())
                        }
                    })?;
                let status = resp.status();
                let body = resp.text().map_err(|e| DetectorError::Transport(e.to_string()))?;
                if !status.is_success() && !body.contains("\"error\"") {
                    return Err(DetectorError::Transport(format!("HTTP {status}: {}", truncate(&body))));
                }
                Ok(body)
            }
        }
    }
}

pub struct ExternalProcessDetector {
    handle: DetectorHandle,
    transport: Transport,
}

impl ExternalProcessDetector {
    /// Spawns the command and checks its handshake against the handle's sign.
    pub fn connect(handle: DetectorHandle, command: Vec<String>) -> Result<Self, DetectorError> {
        let pool = handle.config.get("pool").and_then(Value::as_u64).unwrap_or(1) as usize;
        let (pool, hs) = ProcessPool::start(command, Duration::from_millis(handle.timeout_ms()), pool)?;
        if hs.sign != handle.sign {
            return Err(DetectorError::Config {
                name: handle.name.clone(),
                message: format!("handle declares {} but the detector announced {}", handle.sign, hs.sign),
            });
        }
        Ok(ExternalProcessDetector { handle, transport: Transport::Process(pool) })
    }

    /// Starts the command only to read its handshake.
    pub fn probe(command: &[String], timeout_ms: u64) -> Result<Handshake, DetectorError> {
        if command.is_empty() {
            return Err(DetectorError::Process("empty command".into()));
        }
        Conn::spawn(command, Duration::from_millis(timeout_ms)).map(|(_, hs)| hs)
    }
}

impl Detector for ExternalProcessDetector {
    fn handle(&self) -> &DetectorHandle {
        &self.handle
    }

    fn score_text(&self, id: &str, text: &str) -> Result<ScoreOutput, DetectorError> {
        let reply = self.transport.call(&request_line("score", id, text), id)?;
        parse_score_reply(&reply, id)
    }
}

pub struct ExternalHttpDetector {
    handle: DetectorHandle,
    transport: Transport,
}

impl ExternalHttpDetector {
    pub fn new(handle: DetectorHandle, url: &str) -> Result<Self, DetectorError> {
        let transport = Transport::http(url, handle.timeout_ms())?;
        Ok(ExternalHttpDetector { handle, transport })
    }
}

impl Detector for ExternalHttpDetector {
    fn handle(&self) -> &DetectorHandle {
        &self.handle
    }

    fn score_text(&self, id: &str, text: &str) -> Result<ScoreOutput, DetectorError> {
        let reply = self.transport.call(&request_line("score", id, text), id)?;
        parse_score_reply(&reply, id)
    }
}

/// Token scorer speaking the `score_tokens` method.
pub struct ExternalScorer {
    label: String,
    transport: Transport,
    counter: AtomicUsize,
}

impl ExternalScorer {
    pub fn process(command: Vec<String>, timeout_ms: u64) -> Result<Self, DetectorError> {
        let label = format!("external-process({})", command.join(" "));
        let (pool, _) = ProcessPool::start(command, Duration::from_millis(timeout_ms), 1)?;
        Ok(ExternalScorer { label, transport: Transport::Process(pool), counter: AtomicUsize::new(0) })
    }

    pub fn http(url: &str, timeout_ms: u64) -> Result<Self, DetectorError> {
        Ok(ExternalScorer {
            label: format!("external-http({url})"),
            transport: Transport::http(url, timeout_ms)?,
            counter: AtomicUsize::new(0),
        })
    }
}

impl TokenScorer for ExternalScorer {
    fn score_tokens(&self, text: &str) -> Result<Vec<TokenScore>, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let id = format!("t{}", self.counter.fetch_add(1, Ordering::Relaxed));
        let ext = |e: DetectorError| ScoreError::External(e.to_string());
        let reply = self.transport.call(&request_line("score_tokens", &id, text), &id).map_err(ext)?;
        parse_tokens_reply(&reply, &id).map_err(ext)
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}
