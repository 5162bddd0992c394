//! Minimal in-process HTTP/1.1 server for exercising [`super::RemoteGenerator`]
//! without a real model server. One request per connection.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl StubRequest {
    pub fn json(&self) -> Option<Value> {
        serde_json::from_str(&self.body).ok()
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn ok_json(v: &Value) -> Self {
        StubResponse {
            status: 200,
            body: v.to_string(),
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        StubResponse {
            status,
            body: body.into(),
        }
    }
}

type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync + 'static;

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    hits: Arc<AtomicUsize>,
    log: Arc<Mutex<Vec<StubRequest>>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port and serves `handler` on a
    /// background thread until dropped.
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest) -> StubResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let hits = Arc::new(AtomicUsize::new(0));
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let (stop, hits, log) = (stop.clone(), hits.clone(), log.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let handler = handler.clone();
                    let (hits, log) = (hits.clone(), log.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = serve(stream, &*handler, &hits, &log) {
                            log::debug!("stub server connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(StubServer {
            addr,
            stop,
            hits,
            log,
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn completions_url(&self) -> String {
        self.url("/v1/completions")
    }

    /// Number of requests served so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.log.lock().map(|l| l.clone()).unwrap_or_default()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(
    stream: TcpStream,
    handler: &Handler,
    hits: &AtomicUsize,
    log: &Mutex<Vec<StubRequest>>,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_owned();
    let path = parts.next().unwrap_or_default().to_owned();

    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let req = StubRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    hits.fetch_add(1, Ordering::SeqCst);
    let resp = handler(&req);
    if let Ok(mut l) = log.lock() {
        l.push(req);
    }

    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        reason(resp.status),
        resp.body.len(),
        resp.body
    )?;
    out.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

/// Completions body whose first position carries `top` as its top
/// log-probabilities (token, logprob).
pub fn canned_eval_body(top: &[(&str, f64)]) -> Value {
    let map: serde_json::Map<String, Value> =
        top.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let first = top
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|t| t.0)
        .unwrap_or("");
    json!({
        "choices": [{
            "text": first,
            "finish_reason": "length",
            "logprobs": {"tokens": [first], "top_logprobs": [map]}
        }],
        "usage": {"completion_tokens": 1}
    })
}

/// Completions body for a generation of `tokens` tokens.
pub fn canned_generation_body(text: &str, tokens: u32, finished: bool) -> Value {
    json!({
        "choices": [{
            "text": text,
            "finish_reason": if finished { "stop" } else { "length" },
        }],
        "usage": {"completion_tokens": tokens}
    })
}
