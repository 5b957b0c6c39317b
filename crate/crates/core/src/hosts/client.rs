//! HTTP side of the hub protocol: resumable GETs, PUT uploads, listings.

use std::io;
use std::path::Path;

use futures::StreamExt;
use reqwest::header::{AUTHORIZATION, CONTENT_LENGTH, CONTENT_RANGE, RANGE};
use reqwest::{Response, StatusCode};
use tokio::io::AsyncWriteExt;

use super::server::{ListingEntry, CHECKSUM_HEADER};
use super::HostError;
use crate::digest::Sha256Digest;

#[derive(Debug, Clone)]
pub struct HostClient {
    http: reqwest::Client,
    token: Option<String>,
}

/// What a (possibly resumed) download did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownloadOutcome {
    /// Bytes already on disk that were kept.
    pub resumed_from: u64,
    /// Bytes received by this call.
    pub received: u64,
    /// Final file length.
    pub total: u64,
    /// The server ignored the range request and the file was restarted.
    pub restarted: bool,
}

impl Default for HostClient {
    fn default() -> Self {
        Self::new(None)
    }
}

impl HostClient {
    pub fn new(token: Option<String>) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(std::time::Duration::from_secs(30))
            .build()
            .expect("static client configuration");
        Self { http, token }
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn request(&self, method: reqwest::Method, url: &str) -> reqwest::RequestBuilder {
        let req = self.http.request(method, url);
        match &self.token {
            Some(t) => req.header(AUTHORIZATION, format!("Bearer {t}")),
            None => req,
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder, url: &str) -> Result<Response, HostError> {
        req.send().await.map_err(|e| HostError::Http {
            url: url.to_owned(),
            source: e,
        })
    }

    /// GETs a small resource; `None` on 404.
    pub async fn get_optional(&self, url: &str) -> Result<Option<Vec<u8>>, HostError> {
        let resp = self.send(self.request(reqwest::Method::GET, url), url).await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        let resp = check_status(resp, url)?;
        let bytes = resp.bytes().await.map_err(|e| HostError::Http {
            url: url.to_owned(),
            source: e,
        })?;
        Ok(Some(bytes.to_vec()))
    }

    /// HEAD; `None` on 404, otherwise the server-reported SHA-256 if any.
    pub async fn head_checksum(&self, url: &str) -> Result<Option<Option<Sha256Digest>>, HostError> {
        let resp = self.send(self.request(reqwest::Method::HEAD, url), url).await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        let resp = check_status(resp, url)?;
        let digest = resp
            .headers()
            .get(CHECKSUM_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        Ok(Some(digest))
    }

    pub async fn exists(&self, url: &str) -> Result<bool, HostError> {
        Ok(self.head_checksum(url).await?.is_some())
    }

    /// Downloads `url` to `dest`, continuing from whatever `dest` already
    /// holds via a range request.
    pub async fn download(
        &self,
        url: &str,
        dest: &Path,
        mut progress: impl FnMut(u64),
    ) -> Result<DownloadOutcome, HostError> {
        let partial = match tokio::fs::metadata(dest).await {
            Ok(m) => m.len(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let mut req = self.request(reqwest::Method::GET, url);
        if partial > 0 {
            req = req.header(RANGE, format!("bytes={partial}-"));
        }
        let resp = self.send(req, url).await?;
        let status = resp.status();
        let (resumed_from, restarted) = if partial == 0 {
            (0, false)
        } else if status == StatusCode::PARTIAL_CONTENT {
            let start = content_range_start(&resp);
            if start != Some(partial) {
                return Err(HostError::Protocol(format!(
                    "{url}: asked for bytes from {partial}, server answered {:?}",
                    resp.headers().get(CONTENT_RANGE)
                )));
            }
            (partial, false)
        } else if status == StatusCode::RANGE_NOT_SATISFIABLE {
            let total = content_range_total(&resp);
            if total == Some(partial) {
                return Ok(DownloadOutcome {
                    resumed_from: partial,
                    received: 0,
                    total: partial,
                    restarted: false,
                });
            }
            return Err(HostError::Protocol(format!(
                "{url}: resume offset {partial} is beyond the resource length {}",
                total.map_or("(unknown)".into(), |t| t.to_string())
            )));
        } else if status.is_success() {
            tracing::warn!(url, partial, "server ignored the range request; restarting download");
            (0, true)
        } else {
            (0, false)
        };
        let resp = check_status(resp, url)?;

        let mut file = tokio::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(resumed_from > 0)
            .truncate(resumed_from == 0)
            .open(dest)
            .await?;
        let mut received = 0u64;
        let mut stream = resp.bytes_stream();
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(|e| HostError::Http {
                url: url.to_owned(),
                source: e,
            })?;
            file.write_all(&chunk).await?;
            received += chunk.len() as u64;
            progress(chunk.len() as u64);
        }
        file.flush().await?;
        Ok(DownloadOutcome {
            resumed_from,
            received,
            total: resumed_from + received,
            restarted,
        })
    }

    /// Uploads the file at `src` to `url`.
    pub async fn put_file(&self, url: &str, src: &Path) -> Result<(), HostError> {
        let file = tokio::fs::File::open(src).await?;
        let len = file.metadata().await?.len();
        let body = reqwest::Body::wrap_stream(tokio_util::io::ReaderStream::new(file));
        let req = self
            .request(reqwest::Method::PUT, url)
            .header(CONTENT_LENGTH, len)
            .body(body);
        check_status(self.send(req, url).await?, url)?;
        Ok(())
    }

    pub async fn put_bytes(&self, url: &str, bytes: Vec<u8>) -> Result<(), HostError> {
        let req = self.request(reqwest::Method::PUT, url).body(bytes);
        check_status(self.send(req, url).await?, url)?;
        Ok(())
    }

    pub async fn delete(&self, url: &str) -> Result<(), HostError> {
        let resp = self.send(self.request(reqwest::Method::DELETE, url), url).await?;
        if resp.status() != StatusCode::NOT_FOUND {
            check_status(resp, url)?;
        }
        Ok(())
    }

    /// JSON file listing of a repository, `None` if the host has none.
    pub async fn list(&self, repo_url: &str) -> Result<Option<Vec<ListingEntry>>, HostError> {
        let Some(bytes) = self.get_optional(repo_url).await? else {
            return Ok(None);
        };
        Ok(serde_json::from_slice(&bytes).ok())
    }
}

fn check_status(resp: Response, url: &str) -> Result<Response, HostError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    Err(match status {
        StatusCode::NOT_FOUND => HostError::NotFound(url.to_owned()),
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => HostError::Auth(format!("{status} from {url}")),
        StatusCode::PAYLOAD_TOO_LARGE => HostError::SizeLimit(url.to_owned()),
        _ => HostError::Protocol(format!("unexpected {status} from {url}")),
    })
}

fn content_range(resp: &Response) -> Option<&str> {
    resp.headers().get(CONTENT_RANGE)?.to_str().ok()?.strip_prefix("bytes ")
}

fn content_range_start(resp: &Response) -> Option<u64> {
    content_range(resp)?.split('-').next()?.parse().ok()
}

fn content_range_total(resp: &Response) -> Option<u64> {
    content_range(resp)?.rsplit('/').next()?.parse().ok()
}
