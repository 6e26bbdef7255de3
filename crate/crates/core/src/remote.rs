//! Line-delimited JSON protocol for out-of-process noise predictors.
//!
//! Every message is one JSON object on its own line. The client opens with
//! `{"op":"hello","id":0,"version":1}` and expects a `hello` back; each
//! `predict` is answered by exactly one `result` or `error` carrying the same
//! `id`. Tensors travel as `{"shape": [..], "data": base64 of little-endian f32}`.
//!
//! A request with an empty `cond` asks for the unconditional prediction;
//! otherwise the server returns the guided prediction at `guidance`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, MapOrigin};
use crate::error::{Error, Result};
use crate::predictor::{Conditioning, NoisePredictor, PredictionResult};
use crate::tensor::{decode_f32_le, encode_f32_le, LatentTensor, WireTensor};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Hello,
    Predict,
    Result,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMap {
    pub token: usize,
    pub map: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub op: Op,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concurrent_safe: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<Vec<WireMap>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Message {
    fn bare(op: Op, id: u64) -> Self {
        Self {
            op,
            id,
            version: None,
            concurrent_safe: None,
            latent: None,
            t: None,
            cond: None,
            guidance: None,
            epsilon: None,
            attn: None,
            error: None,
        }
    }

    pub fn hello(id: u64, concurrent_safe: Option<bool>) -> Self {
        Self {
            version: Some(PROTOCOL_VERSION),
            concurrent_safe,
            ..Self::bare(Op::Hello, id)
        }
    }

    pub fn predict(id: u64, z_t: &LatentTensor, t: usize, cond: &str, guidance: f64) -> Self {
        Self {
            latent: Some(z_t.to_wire()),
            t: Some(t),
            cond: Some(cond.to_string()),
            guidance: Some(guidance),
            ..Self::bare(Op::Predict, id)
        }
    }

    pub fn result(id: u64, prediction: &PredictionResult) -> Self {
        let attn = prediction
            .token_maps
            .iter()
            .map(|m| {
                let (h, w) = m.grid();
                WireMap {
                    token: m.token_index,
                    map: WireTensor {
                        shape: vec![h, w],
                        data: encode_f32_le(m.values()),
                    },
                }
            })
            .collect::<Vec<_>>();
        Self {
            epsilon: Some(prediction.epsilon.to_wire()),
            attn: (!attn.is_empty()).then_some(attn),
            ..Self::bare(Op::Result, id)
        }
    }

    pub fn error(id: u64, reason: impl Into<String>) -> Self {
        Self {
            error: Some(WireError { reason: reason.into() }),
            ..Self::bare(Op::Error, id)
        }
    }

    pub fn to_line(&self) -> Result<String> {
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        Ok(line)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim()).map_err(|e| Error::Protocol(format!("malformed message: {e}")))
    }

    /// Decodes a `result` into a prediction.
    pub fn into_prediction(self) -> Result<PredictionResult> {
        let eps = self
            .epsilon
            .ok_or_else(|| Error::Protocol("result without epsilon".into()))?;
        let mut out = PredictionResult::new(LatentTensor::from_wire(&eps)?);
        for m in self.attn.unwrap_or_default() {
            let [h, w] = m.map.shape[..] else {
                return Err(Error::Protocol(format!("map shape {:?} is not 2-d", m.map.shape)));
            };
            let values = decode_f32_le(&m.map.data)?;
            out.token_maps
                .push(AttentionMap::new(h, w, values, m.token, MapOrigin::Target).map_err(|e| Error::Protocol(e.to_string()))?);
        }
        Ok(out)
    }
}

fn handle(
    predictor: &dyn NoisePredictor,
    vocabulary: &BTreeMap<String, String>,
    msg: Message,
) -> Message {
    let id = msg.id;
    match msg.op {
        Op::Hello => Message::hello(id, Some(predictor.concurrent_safe())),
        Op::Predict => {
            let run = || -> Result<PredictionResult> {
                let latent = msg.latent.as_ref().ok_or_else(|| Error::Protocol("predict without latent".into()))?;
                let z = LatentTensor::from_wire(latent)?;
                let t = msg.t.ok_or_else(|| Error::Protocol("predict without t".into()))?;
                let text = msg.cond.as_deref().unwrap_or("");
                let guidance = msg.guidance.unwrap_or(1.0);
                if text.trim().is_empty() {
                    return predictor.predict(&z, t, None);
                }
                let cond = Conditioning::from_prompt(text, vocabulary)?;
                if guidance == 1.0 {
                    predictor.predict(&z, t, Some(&cond))
                } else {
                    predictor.predict_guided(&z, t, &cond, guidance)
                }
            };
            match run() {
                Ok(p) => Message::result(id, &p),
                Err(e) => Message::error(id, e.to_string()),
            }
        }
        other => Message::error(id, format!("unexpected op {other:?}")),
    }
}

/// Serves requests from `input` until it closes. Malformed lines and
/// predictor failures are answered with `error` messages; the session
/// continues.
pub fn serve_lines(
    predictor: &dyn NoisePredictor,
    vocabulary: &BTreeMap<String, String>,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match Message::from_line(&line) {
            Ok(msg) => handle(predictor, vocabulary, msg),
            Err(e) => {
                // salvage the id so the client can still match the reply
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                Message::error(id, e.to_string())
            }
        };
        output.write_all(reply.to_line()?.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}

/// Where a remote predictor lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port` or a bare `host:port`.
    Tcp(String),
    /// `exec:program arg ...`: a child process speaking on stdin/stdout.
    Exec(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::InvalidArgument("exec endpoint needs a command".into()));
            }
            return Ok(Endpoint::Exec(argv));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(Error::InvalidArgument(format!(
                "endpoint `{s}` is neither host:port, tcp://host:port nor exec:COMMAND"
            )))
        }
    }
}

struct Session {
    writer: Box<dyn Write + Send>,
    replies: Receiver<std::io::Result<String>>,
    next_id: u64,
}

impl Session {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let line = msg.to_line()?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::BackendTimeout(format!("endpoint closed: {e}")))
    }

    fn await_reply(&mut self, id: u64, timeout: Duration) -> Result<Message> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.replies.recv_timeout(left) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(Error::BackendTimeout(format!("endpoint closed: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::BackendTimeout(format!("no reply to request {id} within {timeout:?}")))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::BackendTimeout("endpoint closed the connection".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let msg = Message::from_line(&line)?;
            match msg.id.cmp(&id) {
                // a late reply to a request that already timed out
                std::cmp::Ordering::Less => continue,
                std::cmp::Ordering::Greater => {
                    return Err(Error::Protocol(format!("reply id {} for pending request {id}", msg.id)))
                }
                std::cmp::Ordering::Equal => return Ok(msg),
            }
        }
    }
}

/// A [`NoisePredictor`] backed by a remote server. Requests are serialized
/// over one connection.
pub struct RemotePredictor {
    session: Mutex<Session>,
    child: Option<Mutex<Child>>,
    tcp: Option<TcpStream>,
    name: String,
    concurrent_safe: bool,
    timeout: Duration,
}

impl std::fmt::Debug for RemotePredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePredictor")
            .field("name", &self.name)
            .field("concurrent_safe", &self.concurrent_safe)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn spawn_reader(input: impl std::io::Read + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(input).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl RemotePredictor {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        Self::connect_with_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let (session, child, tcp, name) = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::BackendTimeout(format!("cannot reach {addr}: {e}")))?;
                let reader = stream.try_clone()?;
                let control = stream.try_clone()?;
                let session = Session {
                    writer: Box::new(stream),
                    replies: spawn_reader(reader),
                    next_id: 1,
                };
                (session, None, Some(control), format!("remote:{addr}"))
            }
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::BackendTimeout(format!("cannot start `{}`: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("stdin was piped");
                let stdout = child.stdout.take().expect("stdout was piped");
                let session = Session {
                    writer: Box::new(stdin),
                    replies: spawn_reader(stdout),
                    next_id: 1,
                };
                (session, Some(Mutex::new(child)), None, format!("remote:{}", argv[0]))
            }
        };
        Self::handshake(session, child, tcp, name, timeout)
    }

    /// Runs the protocol over an existing pair of streams.
    pub fn from_streams(
        reader: impl std::io::Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let session = Session {
            writer: Box::new(writer),
            replies: spawn_reader(reader),
            next_id: 1,
        };
        Self::handshake(session, None, None, "remote".into(), timeout)
    }

    fn handshake(
        mut session: Session,
        child: Option<Mutex<Child>>,
        tcp: Option<TcpStream>,
        name: String,
        timeout: Duration,
    ) -> Result<Self> {
        session.send(&Message::hello(0, None))?;
        let reply = session.await_reply(0, timeout)?;
        if reply.op != Op::Hello {
            return Err(Error::Protocol(format!("expected hello, got {:?}", reply.op)));
        }
        if reply.version != Some(PROTOCOL_VERSION) {
            return Err(Error::Protocol(format!(
                "server speaks version {:?}, client speaks {PROTOCOL_VERSION}",
                reply.version
            )));
        }
        Ok(Self {
            session: Mutex::new(session),
            child,
            tcp,
            name,
            concurrent_safe: reply.concurrent_safe.unwrap_or(false),
            timeout,
        })
    }

    /// Whether the server advertised concurrent-safe predictions.
    pub fn server_concurrent_safe(&self) -> bool {
        self.concurrent_safe
    }

    fn request(&self, z_t: &LatentTensor, t: usize, cond: &str, guidance: f64) -> Result<PredictionResult> {
        let mut session = self
            .session
            .lock()
            .map_err(|_| Error::backend("remote session poisoned"))?;
        let id = session.next_id;
        session.next_id += 1;
        session.send(&Message::predict(id, z_t, t, cond, guidance))?;
        let reply = session.await_reply(id, self.timeout)?;
        match reply.op {
            Op::Result => {
                let out = reply.into_prediction()?;
                out.epsilon.ensure_same_shape(z_t).map_err(|e| Error::Protocol(e.to_string()))?;
                Ok(out)
            }
            Op::Error => Err(Error::backend(
                reply.error.map(|e| e.reason).unwrap_or_else(|| "unspecified remote error".into()),
            )),
            other => Err(Error::Protocol(format!("unexpected {other:?} reply to predict"))),
        }
    }
}

impl Drop for RemotePredictor {
    fn drop(&mut self) {
        // the reader thread holds a clone of the socket; shutting down
        // unblocks it and signals end of session to the server
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl NoisePredictor for RemotePredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&Conditioning>) -> Result<PredictionResult> {
        match cond {
            None => self.request(z_t, t, "", 0.0),
            Some(c) => self.request(z_t, t, &c.text(), 1.0),
        }
    }

    // one connection serializes calls, so concurrent threads would only queue
    fn concurrent_safe(&self) -> bool {
        false
    }

    fn predict_guided(&self, z_t: &LatentTensor, t: usize, cond: &Conditioning, guidance: f64) -> Result<PredictionResult> {
        self.request(z_t, t, &cond.text(), guidance)
    }
}
