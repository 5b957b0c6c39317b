#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Relative path -> file contents (`None` for directories).
pub type TreeSnapshot = BTreeMap<String, Option<Vec<u8>>>;

pub fn snapshot(root: &Path) -> TreeSnapshot {
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn walk(root: &Path, dir: &Path, out: &mut TreeSnapshot) {
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        let rel = path.strip_prefix(root).unwrap().to_str().unwrap().replace('\\', "/");
        if entry.file_type().unwrap().is_dir() {
            out.insert(rel, None);
            walk(root, &path, out);
        } else {
            out.insert(rel, Some(fs::read(&path).unwrap()));
        }
    }
}

/// Order-independent digest over relative paths and contents.
pub fn tree_digest(root: &Path) -> String {
    let mut h = Sha256::new();
    for (path, data) in snapshot(root) {
        h.update(path.as_bytes());
        match data {
            Some(d) => {
                h.update([1]);
                h.update((d.len() as u64).to_le_bytes());
                h.update(&d);
            }
            None => h.update([0]),
        }
    }
    hex::encode(h.finalize())
}

/// Writes `total` pseudo-random bytes spread over `files` files.
pub fn random_tree(root: &Path, seed: u64, files: usize, total: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(root).unwrap();
    let per = total / files.max(1);
    for i in 0..files {
        let dir = root.join(format!("d{}", i % 7));
        fs::create_dir_all(&dir).unwrap();
        let mut data = vec![0u8; per];
        rng.fill_bytes(&mut data);
        fs::write(dir.join(format!("f{i}-{}.bin", rng.random_range(0..1000))), data).unwrap();
    }
}

pub fn write_meta(root: &Path, t: &str, f: &str) {
    fs::write(root.join("pt_meta.json"), format!(r#"{{"format":"{f}","type":"{t}"}}"#)).unwrap();
}

/// Independent hash via the sha256sum tool when present, else the sha2 crate.
pub fn oracle_sha256(path: &Path) -> String {
    if let Ok(out) = std::process::Command::new("sha256sum").arg(path).output() {
        if out.status.success() {
            let text = String::from_utf8(out.stdout).unwrap();
            return text.split_whitespace().next().unwrap().to_owned();
        }
    }
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// Bytes seen in each direction of one proxied connection.
#[derive(Debug, Default, Clone)]
pub struct Captured {
    pub upstream: Vec<u8>,
    pub downstream: Vec<u8>,
}

pub type CaptureLog = std::sync::Arc<std::sync::Mutex<Vec<std::sync::Arc<std::sync::Mutex<Captured>>>>>;

/// TCP proxy in front of `target` that records every byte it forwards.
pub async fn capture_proxy(target: std::net::SocketAddr) -> (std::net::SocketAddr, CaptureLog) {
    use std::sync::{Arc, Mutex};
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let log: CaptureLog = Arc::default();
    let conns = log.clone();
    tokio::spawn(async move {
        while let Ok((client, _)) = listener.accept().await {
            let Ok(server) = tokio::net::TcpStream::connect(target).await else {
                continue;
            };
            let record = Arc::new(Mutex::new(Captured::default()));
            conns.lock().unwrap().push(record.clone());
            let (mut cr, mut cw) = client.into_split();
            let (mut sr, mut sw) = server.into_split();
            let up = record.clone();
            tokio::spawn(async move {
                let mut buf = vec![0u8; 64 * 1024];
                while let Ok(n) = cr.read(&mut buf).await {
                    if n == 0 || sw.write_all(&buf[..n]).await.is_err() {
                        break;
                    }
                    up.lock().unwrap().upstream.extend_from_slice(&buf[..n]);
                }
                let _ = sw.shutdown().await;
            });
            tokio::spawn(async move {
                let mut buf = vec![0u8; 64 * 1024];
                while let Ok(n) = sr.read(&mut buf).await {
                    if n == 0 || cw.write_all(&buf[..n]).await.is_err() {
                        break;
                    }
                    record.lock().unwrap().downstream.extend_from_slice(&buf[..n]);
                }
                let _ = cw.shutdown().await;
            });
        }
    });
    (addr, log)
}

pub fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
