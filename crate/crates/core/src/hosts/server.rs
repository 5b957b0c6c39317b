//! Reference artifact host: plain HTTP over a directory.
//!
//! `GET /<repo>/<file>` serves bytes (single byte ranges supported),
//! `GET /<repo>` lists files as JSON, `PUT` uploads and `DELETE` removes.
//! `HEAD` on a file also reports its SHA-256 in [`CHECKSUM_HEADER`].

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use futures::StreamExt;
use serde::Serialize;
use tokio::io::{AsyncSeekExt, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_util::io::ReaderStream;

use crate::digest::{sha256_file, Sha256Digest};

pub const CHECKSUM_HEADER: &str = "x-checksum-sha256";
const UPLOAD_PREFIX: &str = ".upload-";
/// Rejected uploads are read up to this much so the client sees the status
/// instead of a reset connection.
const DRAIN_LIMIT: u64 = 64 << 20;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Bearer token required for writes (and for reads when `private`).
    pub token: Option<String>,
    pub readonly: bool,
    pub private: bool,
    /// Honour `Range` headers; when off every GET returns the whole file.
    pub accept_ranges: bool,
    /// Largest single file accepted by PUT.
    pub max_file_size: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            token: None,
            readonly: false,
            private: false,
            accept_ranges: true,
            max_file_size: crate::segments::DEFAULT_MAX_SEGMENT_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoggedRequest {
    pub method: String,
    pub path: String,
    pub range: Option<String>,
    pub status: u16,
}

/// Shared view of every request the server has answered.
#[derive(Debug, Clone, Default)]
pub struct RequestLog(Arc<Mutex<Vec<LoggedRequest>>>);

impl RequestLog {
    pub fn snapshot(&self) -> Vec<LoggedRequest> {
        self.0.lock().expect("request log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("request log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().expect("request log poisoned").clear();
    }

    fn push(&self, entry: LoggedRequest) {
        self.0.lock().expect("request log poisoned").push(entry);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ListingEntry {
    pub name: String,
    pub size: u64,
}

struct ServerState {
    root: PathBuf,
    options: ServeOptions,
    log: RequestLog,
    checksums: Mutex<HashMap<PathBuf, (u64, SystemTime, Sha256Digest)>>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    log: RequestLog,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        (&mut self.task).await.map_err(io::Error::other)?
    }

    /// Runs until the server stops on its own.
    pub async fn wait(mut self) -> io::Result<()> {
        (&mut self.task).await.map_err(io::Error::other)?
    }
}

/// Binds `addr` and serves `root` in the background.
pub async fn serve(root: &Path, addr: SocketAddr, options: ServeOptions) -> io::Result<ServerHandle> {
    if !root.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{} is not a directory", root.display()),
        ));
    }
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let log = RequestLog::default();
    let state = Arc::new(ServerState {
        root: root.canonicalize()?,
        options,
        log: log.clone(),
        checksums: Mutex::new(HashMap::new()),
    });
    let app = Router::new().fallback(handle).with_state(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "serving");
    Ok(ServerHandle {
        addr,
        log,
        shutdown: Some(tx),
        task,
    })
}

async fn handle(
    State(state): State<Arc<ServerState>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let response = dispatch(&state, &method, uri.path(), &headers, body).await;
    state.log.push(LoggedRequest {
        method: method.to_string(),
        path: uri.path().to_owned(),
        range,
        status: response.status().as_u16(),
    });
    response
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, msg.into()).into_response()
}

fn authorized(state: &ServerState, headers: &HeaderMap) -> bool {
    let Some(token) = &state.options.token else {
        return true;
    };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

/// Maps a request path to a location under the root, rejecting anything
/// that could escape it.
fn local_path(root: &Path, path: &str) -> Option<PathBuf> {
    let mut out = root.to_path_buf();
    for seg in path.split('/').filter(|s| !s.is_empty()) {
        if seg == "." || seg == ".." || seg.contains('\\') || seg.contains('\0') || seg.starts_with(UPLOAD_PREFIX) {
            return None;
        }
        out.push(seg);
    }
    Some(out)
}

async fn dispatch(state: &ServerState, method: &Method, path: &str, headers: &HeaderMap, body: Body) -> Response {
    let Some(local) = local_path(&state.root, path) else {
        return error(StatusCode::BAD_REQUEST, "invalid path");
    };
    let reading = method == Method::GET || method == Method::HEAD;
    if reading {
        if state.options.private && !authorized(state, headers) {
            return error(StatusCode::UNAUTHORIZED, "authorization required");
        }
    } else if method == Method::PUT || method == Method::DELETE {
        if state.options.readonly {
            return reject(body, error(StatusCode::METHOD_NOT_ALLOWED, "server is read-only")).await;
        }
        if !authorized(state, headers) {
            return reject(body, error(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")).await;
        }
    } else {
        return error(StatusCode::METHOD_NOT_ALLOWED, "unsupported method");
    }

    let result = match *method {
        Method::PUT => put_file(state, &local, headers, body).await,
        Method::DELETE => delete_file(&local).await,
        _ => get(state, &local, headers, *method == Method::HEAD).await,
    };
    result.unwrap_or_else(|e| {
        tracing::warn!(path, error = %e, "request failed");
        error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    })
}

async fn get(state: &ServerState, local: &Path, headers: &HeaderMap, head: bool) -> io::Result<Response> {
    let meta = match tokio::fs::metadata(local).await {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(error(StatusCode::NOT_FOUND, "not found")),
        Err(e) => return Err(e),
    };
    if meta.is_dir() {
        let listing = list_dir(local).await?;
        let body = serde_json::to_vec(&listing).map_err(io::Error::other)?;
        return Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response());
    }
    let len = meta.len();
    let range = if state.options.accept_ranges {
        match headers.get(header::RANGE).and_then(|v| v.to_str().ok()) {
            Some(spec) => match parse_range(spec, len) {
                RangeSpec::Satisfiable(start, end) => Some((start, end)),
                RangeSpec::Unsatisfiable => {
                    return Ok(Response::builder()
                        .status(StatusCode::RANGE_NOT_SATISFIABLE)
                        .header(header::CONTENT_RANGE, format!("bytes */{len}"))
                        .body(Body::empty())
                        .expect("static response"));
                }
                RangeSpec::Ignored => None,
            },
            None => None,
        }
    } else {
        None
    };

    let mut builder = Response::builder().header(header::CONTENT_TYPE, "application/octet-stream");
    if state.options.accept_ranges {
        builder = builder.header(header::ACCEPT_RANGES, "bytes");
    }
    let (start, count) = match range {
        Some((start, end)) => {
            builder = builder
                .status(StatusCode::PARTIAL_CONTENT)
                .header(header::CONTENT_RANGE, format!("bytes {start}-{end}/{len}"));
            (start, end - start + 1)
        }
        None => (0, len),
    };
    builder = builder.header(header::CONTENT_LENGTH, count);
    if head {
        let digest = checksum(state, local, &meta).await?;
        let value = HeaderValue::from_str(&digest.to_hex()).expect("hex is a valid header");
        return Ok(builder
            .header(CHECKSUM_HEADER, value)
            .body(Body::empty())
            .expect("valid response"));
    }
    let mut file = tokio::fs::File::open(local).await?;
    file.seek(io::SeekFrom::Start(start)).await?;
    let stream = ReaderStream::new(tokio::io::AsyncReadExt::take(file, count));
    Ok(builder.body(Body::from_stream(stream)).expect("valid response"))
}

async fn checksum(state: &ServerState, local: &Path, meta: &std::fs::Metadata) -> io::Result<Sha256Digest> {
    let mtime = meta.modified()?;
    let len = meta.len();
    if let Some((l, m, d)) = state.checksums.lock().expect("checksum cache poisoned").get(local) {
        if *l == len && *m == mtime {
            return Ok(*d);
        }
    }
    let path = local.to_path_buf();
    let (digest, _) = tokio::task::spawn_blocking(move || sha256_file(&path))
        .await
        .map_err(io::Error::other)??;
    state
        .checksums
        .lock()
        .expect("checksum cache poisoned")
        .insert(local.to_path_buf(), (len, mtime, digest));
    Ok(digest)
}

async fn list_dir(dir: &Path) -> io::Result<Vec<ListingEntry>> {
    let mut out = Vec::new();
    let mut rd = tokio::fs::read_dir(dir).await?;
    while let Some(entry) = rd.next_entry().await? {
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        let meta = entry.metadata().await?;
        if meta.is_file() && !name.starts_with(UPLOAD_PREFIX) {
            out.push(ListingEntry { name, size: meta.len() });
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

async fn put_file(state: &ServerState, local: &Path, headers: &HeaderMap, body: Body) -> io::Result<Response> {
    let limit = state.options.max_file_size;
    let too_large = || {
        error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("file exceeds the {limit}-byte limit"),
        )
    };
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit) {
        return Ok(reject(body, too_large()).await);
    }
    let Some(parent) = local
        .parent()
        .filter(|p| p.starts_with(&state.root) && *p != state.root)
    else {
        return Ok(error(StatusCode::BAD_REQUEST, "uploads go to /<repo>/<file>"));
    };
    if local.is_dir() {
        return Ok(error(StatusCode::CONFLICT, "path is a directory"));
    }
    tokio::fs::create_dir_all(parent).await?;
    let tmp = tempfile::Builder::new().prefix(UPLOAD_PREFIX).tempfile_in(parent)?;
    let (std_file, tmp_path) = tmp.into_parts();
    let mut file = tokio::fs::File::from_std(std_file);
    let mut written = 0u64;
    let mut stream = body.into_data_stream();
    while let Some(chunk) = stream.next().await {
        let chunk = match chunk {
            Ok(c) => c,
            Err(e) => return Ok(error(StatusCode::BAD_REQUEST, format!("upload interrupted: {e}"))),
        };
        written += chunk.len() as u64;
        if written > limit {
            return Ok(reject(Body::from_stream(stream), too_large()).await);
        }
        file.write_all(&chunk).await?;
    }
    file.flush().await?;
    file.sync_all().await?;
    drop(file);
    tmp_path.persist(local).map_err(|e| e.error)?;
    Ok(StatusCode::CREATED.into_response())
}

async fn reject(body: Body, response: Response) -> Response {
    let mut drained = 0u64;
    let mut stream = body.into_data_stream();
    while drained <= DRAIN_LIMIT {
        match stream.next().await {
            Some(Ok(chunk)) => drained += chunk.len() as u64,
            _ => break,
        }
    }
    response
}

async fn delete_file(local: &Path) -> io::Result<Response> {
    match tokio::fs::remove_file(local).await {
        Ok(()) => Ok(StatusCode::NO_CONTENT.into_response()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(error(StatusCode::NOT_FOUND, "not found")),
        Err(e) => Err(e),
    }
}

#[derive(Debug, PartialEq, Eq)]
enum RangeSpec {
    /// Inclusive byte bounds.
    Satisfiable(u64, u64),
    Unsatisfiable,
    /// Malformed or multi-range; served as a plain 200.
    Ignored,
}

fn parse_range(spec: &str, len: u64) -> RangeSpec {
    let Some(spec) = spec.trim().strip_prefix("bytes=") else {
        return RangeSpec::Ignored;
    };
    if spec.contains(',') {
        return RangeSpec::Ignored;
    }
    let Some((a, b)) = spec.split_once('-') else {
        return RangeSpec::Ignored;
    };
    let (a, b) = (a.trim(), b.trim());
    match (a.is_empty(), b.is_empty()) {
        (true, true) => RangeSpec::Ignored,
        (true, false) => match b.parse::<u64>() {
            Ok(0) => RangeSpec::Unsatisfiable,
            Ok(_) if len == 0 => RangeSpec::Unsatisfiable,
            Ok(n) => RangeSpec::Satisfiable(len.saturating_sub(n), len - 1),
            Err(_) => RangeSpec::Ignored,
        },
        (false, _) => {
            let Ok(start) = a.parse::<u64>() else {
                return RangeSpec::Ignored;
            };
            let end = if b.is_empty() {
                u64::MAX
            } else {
                match b.parse::<u64>() {
                    Ok(e) if e >= start => e,
                    _ => return RangeSpec::Ignored,
                }
            };
            if start >= len {
                RangeSpec::Unsatisfiable
            } else {
                RangeSpec::Satisfiable(start, end.min(len - 1))
            }
        }
    }
}
