//! Line-delimited JSON protocol for evaluators running in another process.
//!
//! The engine writes one request per line to the worker's stdin and reads
//! one response per line from its stdout. Every request gets exactly one
//! response carrying the same `id`. A session opens with `hello` (carrying
//! the opaque worker config) and closes with `shutdown`.
//!
//! ```text
//! -> {"id":1,"type":"hello","version":"1","config":{...}}
//! <- {"id":1,"type":"hello_ok","version":"1"}
//! -> {"id":2,"type":"baseline"}
//! <- {"id":2,"type":"score","score":0.75}
//! -> {"id":3,"type":"evaluate","policy":[{"group":"g2","layer":32,"module":"mlp"}]}
//! <- {"id":3,"type":"error","message":"out of memory"}
//! -> {"id":4,"type":"shutdown"}
//! <- {"id":4,"type":"hello_ok","version":"1"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use opprune_core::eval::{CallCounter, EvalError, Evaluator, Score};
use opprune_core::model::{Policy, TokenLayout};
use serde::{Deserialize, Serialize};

use crate::format::{policy_records, OpRecord};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    Hello,
    Evaluate,
    Baseline,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: RequestType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<OpRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseType {
    HelloOk,
    Score,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireResponse {
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: ResponseType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

impl WireResponse {
    pub fn hello_ok(id: u64) -> Self {
        WireResponse {
            id,
            kind: ResponseType::HelloOk,
            score: None,
            message: None,
            version: Some(PROTOCOL_VERSION.into()),
        }
    }

    pub fn score(id: u64, score: f64) -> Self {
        WireResponse {
            id,
            kind: ResponseType::Score,
            score: Some(score),
            message: None,
            version: None,
        }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        WireResponse {
            id,
            kind: ResponseType::Error,
            score: None,
            message: Some(message.into()),
            version: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("failed to launch worker `{command}`: {source}")]
    Launch {
        command: String,
        source: std::io::Error,
    },
    #[error("worker did not answer the handshake within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("worker speaks protocol version {found:?}, expected {PROTOCOL_VERSION:?}")]
    VersionMismatch { found: Option<String> },
    #[error("worker rejected the handshake: {0}")]
    HandshakeRejected(String),
    #[error("worker protocol error: {0}")]
    Protocol(String),
    #[error("worker exited")]
    Exited,
    #[error("worker I/O: {0}")]
    Io(#[from] std::io::Error),
}

enum Line {
    Text(String),
    Eof,
    Failed(String),
}

struct Link {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    next_id: u64,
    broken: Option<String>,
}

impl Link {
    fn send(&mut self, req: &WireRequest) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        let mut line = serde_json::to_string(req).expect("requests always serialize");
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()
    }

    fn recv(&mut self, timeout: Duration) -> Result<WireResponse, Recv> {
        match self.lines.recv_timeout(timeout) {
            Ok(Line::Text(text)) => serde_json::from_str(&text)
                .map_err(|e| Recv::Protocol(format!("malformed response {text:?}: {e}"))),
            Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => Err(Recv::Exited),
            Ok(Line::Failed(e)) => Err(Recv::Protocol(e)),
            Err(RecvTimeoutError::Timeout) => Err(Recv::Timeout),
        }
    }

    fn request(
        &mut self,
        kind: RequestType,
        policy: Option<Vec<OpRecord>>,
        timeout: Duration,
    ) -> Result<WireResponse, Recv> {
        let id = self.next_id;
        self.next_id += 1;
        let req = WireRequest {
            id,
            kind,
            version: None,
            policy,
            config: None,
        };
        self.send(&req).map_err(|_| Recv::Exited)?;
        let resp = self.recv(timeout)?;
        if resp.id != id {
            return Err(Recv::Protocol(format!(
                "response id {} does not match request id {id}",
                resp.id
            )));
        }
        Ok(resp)
    }
}

enum Recv {
    Timeout,
    Exited,
    Protocol(String),
}

/// A live worker process. Calls are serialized through an internal lock, so
/// the session reports itself as not safe for concurrent evaluation.
///
/// After a timeout, a protocol error or the worker exiting, the session is
/// broken and every further call fails.
pub struct WorkerSession {
    link: Mutex<Link>,
    layout: TokenLayout,
    timeout: Duration,
    calls: CallCounter,
}

/// Launches `command` and performs the handshake, waiting at most `timeout`
/// for each response.
pub fn spawn_worker(
    command: &[String],
    config: serde_json::Value,
    layout: TokenLayout,
    timeout: Duration,
) -> Result<WorkerSession, BridgeError> {
    let (program, args) = command.split_first().ok_or_else(|| BridgeError::Launch {
        command: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
    })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| BridgeError::Launch {
            command: command.join(" "),
            source,
        })?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stdin = child.stdin.take();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stdout);
        loop {
            let mut buf = String::new();
            let msg = match reader.read_line(&mut buf) {
                Ok(0) => Line::Eof,
                Ok(_) => Line::Text(buf.trim_end_matches(['\n', '\r']).to_string()),
                Err(e) => Line::Failed(e.to_string()),
            };
            let done = !matches!(msg, Line::Text(_));
            if tx.send(msg).is_err() || done {
                break;
            }
        }
    });
    let mut link = Link {
        child,
        stdin,
        lines: rx,
        next_id: 1,
        broken: None,
    };
    let hello = WireRequest {
        id: 1,
        kind: RequestType::Hello,
        version: Some(PROTOCOL_VERSION.into()),
        policy: None,
        config: Some(config),
    };
    link.next_id = 2;
    let handshake = link
        .send(&hello)
        .map_err(BridgeError::from)
        .and_then(|_| match link.recv(timeout) {
            Ok(r) => Ok(r),
            Err(Recv::Timeout) => Err(BridgeError::HandshakeTimeout(timeout)),
            Err(Recv::Exited) => Err(BridgeError::Exited),
            Err(Recv::Protocol(m)) => Err(BridgeError::Protocol(m)),
        })
        .and_then(|resp| match resp.kind {
            _ if resp.id != 1 => Err(BridgeError::Protocol(format!(
                "handshake answered with id {}",
                resp.id
            ))),
            ResponseType::HelloOk if resp.version.as_deref() == Some(PROTOCOL_VERSION) => Ok(()),
            ResponseType::HelloOk => Err(BridgeError::VersionMismatch {
                found: resp.version,
            }),
            ResponseType::Error => Err(BridgeError::HandshakeRejected(
                resp.message.unwrap_or_default(),
            )),
            ResponseType::Score => Err(BridgeError::Protocol("handshake answered with a score".into())),
        });
    if let Err(e) = handshake {
        kill(&mut link);
        return Err(e);
    }
    Ok(WorkerSession {
        link: Mutex::new(link),
        layout,
        timeout,
        calls: CallCounter::new(),
    })
}

fn kill(link: &mut Link) {
    link.stdin = None;
    let _ = link.child.kill();
    let _ = link.child.wait();
}

impl WorkerSession {
    fn call(&self, kind: RequestType, policy: Option<Vec<OpRecord>>) -> Result<Score, EvalError> {
        self.calls.bump();
        let mut link = self.link.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(why) = &link.broken {
            return Err(EvalError::Failed(format!("worker session unusable: {why}")));
        }
        let result = match link.request(kind, policy, self.timeout) {
            Ok(resp) => match resp.kind {
                ResponseType::Score => match resp.score {
                    Some(s) => return Ok(s),
                    None => Err(EvalError::Protocol("score response without a score".into())),
                },
                // a reported failure leaves the worker usable
                ResponseType::Error => {
                    return Err(EvalError::Failed(resp.message.unwrap_or_default()))
                }
                ResponseType::HelloOk => {
                    Err(EvalError::Protocol("unexpected hello_ok response".into()))
                }
            },
            Err(Recv::Timeout) => Err(EvalError::Timeout),
            Err(Recv::Exited) => Err(EvalError::Failed("worker exited".into())),
            Err(Recv::Protocol(m)) => Err(EvalError::Protocol(m)),
        };
        if let Err(e) = &result {
            link.broken = Some(e.to_string());
            kill(&mut link);
        }
        result
    }

    /// Sends `shutdown` and waits for the worker to exit.
    pub fn shutdown(self) -> Result<(), BridgeError> {
        let mut link = self.link.into_inner().unwrap_or_else(|e| e.into_inner());
        if link.broken.is_some() {
            return Ok(());
        }
        let outcome = link.request(RequestType::Shutdown, None, self.timeout);
        link.stdin = None;
        match outcome {
            Ok(_) => {
                let _ = link.child.wait();
                Ok(())
            }
            Err(e) => {
                kill(&mut link);
                match e {
                    Recv::Timeout => Err(BridgeError::Protocol("shutdown timed out".into())),
                    Recv::Exited => Ok(()),
                    Recv::Protocol(m) => Err(BridgeError::Protocol(m)),
                }
            }
        }
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        if self.child.try_wait().ok().flatten().is_none() {
            kill(self);
        }
    }
}

impl Evaluator for WorkerSession {
    fn evaluate(&self, policy: &Policy) -> Result<Score, EvalError> {
        self.call(
            RequestType::Evaluate,
            Some(policy_records(&self.layout, policy)),
        )
    }

    fn baseline(&self, empty: &Policy) -> Result<Score, EvalError> {
        debug_assert!(empty.is_empty());
        self.call(RequestType::Baseline, None)
    }

    fn call_count(&self) -> u64 {
        self.calls.get()
    }

    fn concurrency_safe(&self) -> bool {
        false
    }
}
