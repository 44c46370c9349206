//! Remote LM service client and a bundled mock server.
//!
//! Wire protocol (stateless; the full context is sent on every call):
//! - `GET /vocab` → `{"digest": hex, "size": int}`
//! - `POST /score` with `{"context": [int], "mask": [int] | null,
//!   "renormalize": bool}` → `{"logprobs": [float], "eos_logprob": float}`
//!
//! In a mask, the id equal to the vocabulary size stands for EOS; when a mask
//! is present the server applies it (and renormalizes if requested) before
//! responding. JSON has no literal for −∞, so masked-out entries travel as
//! `null` and are read back as negative infinity.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::lm::{apply_mask, LmError, LmScorer, LogProbs, ScoreMask, UniformScorer};
use crate::tokenizer::TokenId;

#[derive(Serialize, Deserialize)]
struct ScoreRequest {
    context: Vec<TokenId>,
    mask: Option<Vec<TokenId>>,
    renormalize: bool,
}

#[derive(Serialize, Deserialize)]
struct ScoreResponse {
    logprobs: Vec<Option<f64>>,
    eos_logprob: Option<f64>,
}

fn to_wire(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn from_wire(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NEG_INFINITY)
}

#[derive(Serialize, Deserialize)]
struct VocabResponse {
    digest: String,
    size: usize,
}

/// Exact request bytes for a `/score` call; kept as a standalone function so
/// the serialization stays golden-file testable.
pub fn score_request_body(
    context: &[TokenId],
    mask: Option<&ScoreMask>,
    renormalize: bool,
) -> String {
    let req = ScoreRequest {
        context: context.to_vec(),
        mask: mask.map(|m| {
            let mut ids: Vec<TokenId> = m.tokens.iter().copied().collect();
            if m.eos {
                ids.push(eos_mask_id_for(&m.tokens));
            }
            ids
        }),
        renormalize,
    };
    serde_json::to_string(&req).expect("request serializes")
}

// The EOS mask id must be the vocab size, which the mask itself does not
// carry; the client substitutes the real value before sending.
fn eos_mask_id_for(_tokens: &BTreeSet<TokenId>) -> TokenId {
    EOS_PLACEHOLDER
}

const EOS_PLACEHOLDER: TokenId = TokenId::MAX;

/// HTTP client for the remote LM protocol. Construction performs the
/// vocabulary-digest handshake and fails hard on mismatch.
pub struct RemoteScorer {
    endpoint: String,
    vocab_size: usize,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn connect(endpoint: &str, expected_digest: &str) -> Result<Self, LmError> {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(10))
            .build();
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let resp = agent
            .get(&format!("{endpoint}/vocab"))
            .call()
            .map_err(|e| LmError::Transport(e.to_string()))?;
        let vocab: VocabResponse =
            resp.into_json().map_err(|e| LmError::Protocol(e.to_string()))?;
        if vocab.digest != expected_digest {
            return Err(LmError::DigestMismatch {
                local: expected_digest.to_string(),
                remote: vocab.digest,
            });
        }
        Ok(RemoteScorer { endpoint, vocab_size: vocab.size, agent })
    }

    fn score(
        &self,
        context: &[TokenId],
        mask: Option<&ScoreMask>,
        renormalize: bool,
    ) -> Result<LogProbs, LmError> {
        let body = score_request_body(context, mask, renormalize)
            .replace(&EOS_PLACEHOLDER.to_string(), &self.vocab_size.to_string());
        let resp = self
            .agent
            .post(&format!("{}/score", self.endpoint))
            .set("content-type", "application/json")
            .send_string(&body)
            .map_err(|e| LmError::Transport(e.to_string()))?;
        let parsed: ScoreResponse =
            resp.into_json().map_err(|e| LmError::Protocol(e.to_string()))?;
        if parsed.logprobs.len() != self.vocab_size {
            return Err(LmError::Protocol(format!(
                "expected {} logprobs, got {}",
                self.vocab_size,
                parsed.logprobs.len()
            )));
        }
        Ok(LogProbs {
            tokens: parsed.logprobs.into_iter().map(from_wire).collect(),
            eos: from_wire(parsed.eos_logprob),
        })
    }
}

impl LmScorer for RemoteScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_logprobs(&self, context: &[TokenId]) -> Result<LogProbs, LmError> {
        self.score(context, None, false)
    }

    fn next_logprobs(
        &self,
        context: &[TokenId],
        mask: Option<&ScoreMask>,
        renormalize: bool,
    ) -> Result<LogProbs, LmError> {
        // masking happens server-side
        self.score(context, mask, renormalize)
    }
}

// ---------------------------------------------------------------------------
// Mock server

/// Scoring behavior served by [`MockLmServer`].
pub enum MockBehavior {
    /// Uniform over vocab + EOS.
    Uniform,
    /// Arbitrary context-dependent distribution.
    Scripted(Box<dyn Fn(&[TokenId]) -> LogProbs + Send + Sync>),
}

/// Minimal single-threaded HTTP server implementing the LM wire protocol,
/// for tests and the bundled `serve-mock-lm` command.
pub struct MockLmServer {
    addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockLmServer {
    /// Bind to 127.0.0.1 on an ephemeral port and serve until dropped.
    pub fn spawn(digest: String, vocab_size: usize, behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = format!("http://{}", listener.local_addr()?);
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            serve_loop(listener, digest, vocab_size, behavior, stop2);
        });
        Ok(MockLmServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }
}

impl Drop for MockLmServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Serve the protocol on an already-bound listener until `stop` is set.
/// Public so the CLI can run a foreground mock server.
pub fn serve_loop(
    listener: TcpListener,
    digest: String,
    vocab_size: usize,
    behavior: MockBehavior,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = handle_connection(stream, &digest, vocab_size, &behavior);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    digest: &str,
    vocab_size: usize,
    behavior: &MockBehavior,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let (status, response) = route(&request_line, &body, digest, vocab_size, behavior);
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{response}",
        response.len()
    )?;
    out.flush()
}

fn route(
    request_line: &str,
    body: &[u8],
    digest: &str,
    vocab_size: usize,
    behavior: &MockBehavior,
) -> (&'static str, String) {
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    match (method, path) {
        ("GET", "/vocab") => {
            let resp = VocabResponse { digest: digest.to_string(), size: vocab_size };
            ("200 OK", serde_json::to_string(&resp).unwrap())
        }
        ("POST", "/score") => match serde_json::from_slice::<ScoreRequest>(body) {
            Ok(req) => {
                let mut lp = match behavior {
                    MockBehavior::Uniform => UniformScorer { vocab_size }
                        .raw_logprobs(&req.context)
                        .unwrap_or(LogProbs {
                            tokens: vec![f64::NEG_INFINITY; vocab_size],
                            eos: f64::NEG_INFINITY,
                        }),
                    MockBehavior::Scripted(f) => f(&req.context),
                };
                if let Some(ids) = &req.mask {
                    let mask = ScoreMask {
                        tokens: ids
                            .iter()
                            .copied()
                            .filter(|&t| (t as usize) < vocab_size)
                            .collect(),
                        eos: ids.iter().any(|&t| t as usize == vocab_size),
                    };
                    apply_mask(&mut lp, &mask, req.renormalize);
                }
                let resp = ScoreResponse {
                    logprobs: lp.tokens.into_iter().map(to_wire).collect(),
                    eos_logprob: to_wire(lp.eos),
                };
                ("200 OK", serde_json::to_string(&resp).unwrap())
            }
            Err(e) => ("400 Bad Request", format!("{{\"error\":\"{e}\"}}")),
        },
        _ => ("404 Not Found", "{\"error\":\"not found\"}".to_string()),
    }
}
