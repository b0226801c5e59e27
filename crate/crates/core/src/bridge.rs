//! Client side of the out-of-process policy protocol.
//!
//! Line-delimited JSON over a byte stream (normally a child process's
//! stdin/stdout). One request in flight at a time; every response must echo
//! the request id.
//!
//! ```text
//! → {"op":"hello","id":1,"payload":{"proto":1}}
//! ← {"id":1,"ok":true,"payload":{"proto":1,"capabilities":["sample","logprobs","option_probs"]}}
//! → {"op":"option_probs","id":2,"payload":{"sample":{...},"encoded":{"query":[..],"option_tokens":[..],"target":[..]},"frames":[..]}}
//! ← {"id":2,"ok":true,"payload":{"probs":[0.25,0.75]}}
//! → {"op":"sample","id":3,"payload":{...,"temperature":0.0,"max_len":4,"seed":7}}
//! ← {"id":3,"ok":true,"payload":{"tokens":[5,1],"token_logprobs":[-0.2,-0.1]}}
//! → {"op":"logprobs","id":4,"payload":{...,"tokens":[5,1]}}
//! ← {"id":4,"ok":true,"payload":{"logprobs":[-0.2,-0.1]}}
//! ← {"id":5,"ok":false,"error":{"code":"unsupported","message":"unknown op foo"}}
//! ```
//!
//! `hello` may also return `"text_vocab": [...]`; when it does, it must equal
//! the trainer's vocabulary.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{EncodedSample, FrameSeq, Response, Sample, Vocab};
use crate::error::{Error, Result};
use crate::policy::{ProbVector, RolloutPolicy};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub op: String,
    pub id: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BridgeErrorBody>,
}

/// Token-level view of a sample sent alongside its text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedPayload {
    pub query: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_tokens: Option<Vec<u32>>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub sample: Sample,
    pub encoded: EncodedPayload,
    pub frames: Vec<u32>,
}

impl SamplePayload {
    pub fn new(enc: &EncodedSample, frames: &FrameSeq) -> Self {
        Self {
            sample: enc.sample.clone(),
            encoded: EncodedPayload {
                query: enc.query.clone(),
                option_tokens: enc.option_tokens.clone(),
                target: enc.target.clone(),
            },
            frames: frames.tokens().to_vec(),
        }
    }
}

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    child: Option<Child>,
}

/// A remote policy reached over the line protocol.
pub struct BridgeClient {
    tag: String,
    conn: Mutex<Conn>,
    capabilities: Vec<String>,
}

impl BridgeClient {
    /// Connect over an existing stream pair and perform the handshake.
    pub fn connect(
        tag: impl Into<String>,
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        vocab: Option<&Vocab>,
    ) -> Result<Self> {
        let mut client = Self {
            tag: tag.into(),
            conn: Mutex::new(Conn { reader, writer, next_id: 1, child: None }),
            capabilities: Vec::new(),
        };
        let hello = client.call("hello", json!({ "proto": PROTOCOL_VERSION }))?;
        let proto = hello.get("proto").and_then(Value::as_u64);
        if proto != Some(PROTOCOL_VERSION) {
            return Err(Error::Bridge(format!("peer speaks protocol {proto:?}, expected {PROTOCOL_VERSION}")));
        }
        client.capabilities = hello
            .get("capabilities")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        if let (Some(v), Some(words)) = (vocab, hello.get("text_vocab")) {
            let words: Vec<String> = serde_json::from_value(words.clone())?;
            if words != v.words() {
                return Err(Error::Bridge("peer vocabulary differs from the trainer's".into()));
            }
        }
        Ok(client)
    }

    /// Spawn `command` and speak the protocol over its stdin/stdout.
    pub fn spawn(tag: impl Into<String>, command: &[String], vocab: Option<&Vocab>) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty bridge command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::connect(tag, Box::new(BufReader::new(stdout)), Box::new(stdin), vocab)?;
        client.conn.lock().unwrap_or_else(|e| e.into_inner()).child = Some(child);
        Ok(client)
    }

    pub fn capabilities(&self) -> &[String] {
        &self.capabilities
    }

    /// Send one request and wait for its response payload.
    pub fn call(&self, op: &str, payload: Value) -> Result<Value> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let id = conn.next_id;
        conn.next_id += 1;
        let mut line = serde_json::to_string(&BridgeRequest { op: op.into(), id, payload })?;
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| Error::Bridge(format!("send failed: {e}")))?;
        let mut reply = String::new();
        let n = conn
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::Bridge(format!("receive failed: {e}")))?;
        if n == 0 {
            return Err(Error::Bridge("connection closed".into()));
        }
        let resp: BridgeResponse =
            serde_json::from_str(&reply).map_err(|e| Error::Bridge(format!("unparseable response: {e}")))?;
        if resp.id != id {
            return Err(Error::Bridge(format!("response id {} does not match request id {id}", resp.id)));
        }
        if !resp.ok {
            let e = resp.error.unwrap_or(BridgeErrorBody { code: "unknown".into(), message: String::new() });
            return Err(Error::Bridge(format!("{}: {}", e.code, e.message)));
        }
        resp.payload.ok_or_else(|| Error::Bridge("ok response without payload".into()))
    }

    fn field<T: serde::de::DeserializeOwned>(v: &Value, name: &str) -> Result<T> {
        let f = v.get(name).ok_or_else(|| Error::Bridge(format!("response lacks {name:?}")))?;
        serde_json::from_value(f.clone()).map_err(|e| Error::Bridge(format!("bad {name:?}: {e}")))
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|e| e.into_inner());
        if let Some(mut child) = conn.child.take() {
            // closing stdin lets a well-behaved adapter exit on EOF
            conn.writer = Box::new(std::io::sink());
            for _ in 0..100 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl RolloutPolicy for BridgeClient {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn sample(&self, enc: &EncodedSample, frames: &FrameSeq, temperature: f64, max_len: usize, seed: u64) -> Result<Response> {
        let mut p = serde_json::to_value(SamplePayload::new(enc, frames))?;
        p["temperature"] = json!(temperature);
        p["max_len"] = json!(max_len);
        p["seed"] = json!(seed);
        let v = self.call("sample", p)?;
        let tokens: Vec<u32> = Self::field(&v, "tokens")?;
        let token_logprobs: Vec<f64> = Self::field(&v, "token_logprobs")?;
        if tokens.len() != token_logprobs.len() {
            return Err(Error::Length { expected: tokens.len(), actual: token_logprobs.len() });
        }
        Ok(Response { tokens, token_logprobs, policy_tag: self.tag.clone() })
    }

    fn logprobs(&self, enc: &EncodedSample, frames: &FrameSeq, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut p = serde_json::to_value(SamplePayload::new(enc, frames))?;
        p["tokens"] = json!(tokens);
        let lp: Vec<f64> = Self::field(&self.call("logprobs", p)?, "logprobs")?;
        if lp.len() != tokens.len() {
            return Err(Error::Length { expected: tokens.len(), actual: lp.len() });
        }
        Ok(lp)
    }

    fn option_probs(&self, enc: &EncodedSample, frames: &FrameSeq) -> Result<ProbVector> {
        let p = serde_json::to_value(SamplePayload::new(enc, frames))?;
        let probs: Vec<f64> = Self::field(&self.call("option_probs", p)?, "probs")?;
        // peers may round; renormalize within the protocol's tolerance
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Bridge(format!("option probabilities sum to {s}")));
        }
        ProbVector::from_weights(&probs)
    }
}
