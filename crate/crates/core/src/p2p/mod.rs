//! One-off transfers between two machines through a rendezvous relay,
//! addressed by a short one-time code.
//!
//! Both ends present only SHA-256 of the code to the relay. The sender
//! always transfers a serialization file (trees are packed first); the
//! receiver checks the whole-file digest carried by DONE before unpacking
//! and acknowledges with its own DONE.

pub mod code;
pub mod frame;
pub mod relay;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use sha2::{Digest, Sha256};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::Instant;
use tokio_util::codec::Framed;

pub use code::{InvalidCode, TransferCode};
pub use frame::{Frame, FrameCodec, FrameError, FrameType};
pub use relay::{relay_serve, RelayHandle};

use crate::archive::{self, ArchiveError, PackOptions};
use crate::digest::Sha256Digest;
use relay::{Conn, ACCEPT_PAIRED, ACCEPT_WAITING, CHANNEL_IN_USE, NO_SUCH_CHANNEL};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_RELAY: &str = "127.0.0.1:4001";
const CHUNK: usize = frame::MAX_DATA_PAYLOAD;
const CODE_ATTEMPTS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum P2pError {
    #[error("cannot reach relay {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    InvalidCode(#[from] InvalidCode),
    #[error("code collision: a transfer with this code is already waiting")]
    Collision,
    #[error("no such channel: the code is wrong, already used or expired")]
    NoSuchChannel,
    #[error("timed out after {0:?} waiting for the other side")]
    Timeout(Duration),
    #[error("transfer aborted: {0}")]
    Aborted(String),
    #[error("integrity error: received data hashes to {actual}, sender announced {expected}")]
    Integrity {
        expected: Sha256Digest,
        actual: Sha256Digest,
    },
    #[error("receiver rejected the transfer: {0}")]
    Rejected(String),
    #[error("relay protocol error: {0}")]
    Protocol(String),
    #[error("destination {0} already exists and is not empty")]
    DestinationExists(PathBuf),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

async fn connect(relay: &str) -> Result<Conn, P2pError> {
    let stream = TcpStream::connect(relay).await.map_err(|source| P2pError::Connect {
        addr: relay.to_owned(),
        source,
    })?;
    stream.set_nodelay(true)?;
    Ok(Framed::new(stream, frame::FrameCodec))
}

async fn next_frame(conn: &mut Conn, deadline: Instant, timeout: Duration) -> Result<Option<Frame>, P2pError> {
    match tokio::time::timeout_at(deadline, conn.next()).await {
        Err(_) => Err(P2pError::Timeout(timeout)),
        Ok(None) => Ok(None),
        Ok(Some(frame)) => Ok(Some(frame?)),
    }
}

#[derive(Debug, Clone)]
pub struct SendOptions {
    /// How long to wait for a receiver, and for each step after that.
    pub timeout: Duration,
    /// Use this code instead of a random one.
    pub code: Option<TransferCode>,
    pub compression_level: u32,
}

impl Default for SendOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            code: None,
            compression_level: PackOptions::default().compression_level,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SendReport {
    pub code: TransferCode,
    pub sha256: Sha256Digest,
    pub size: u64,
}

/// Offers `artifact` (a tree or serialization file) on the relay.
/// `on_code` is called once the relay has registered the code; the call
/// then blocks until the receiver confirms delivery.
pub async fn send(
    artifact: &Path,
    relay: &str,
    options: &SendOptions,
    on_code: impl FnOnce(&TransferCode),
) -> Result<SendReport, P2pError> {
    let packed_dir;
    let file = if artifact.is_dir() {
        packed_dir = tempfile::tempdir()?;
        let dest = packed_dir.path().join(archive::DEFAULT_ARCHIVE_NAME);
        let (tree, out, level) = (artifact.to_path_buf(), dest.clone(), options.compression_level);
        tokio::task::spawn_blocking(move || {
            let opts = PackOptions {
                compression_level: level,
                ..PackOptions::default()
            };
            archive::pack(&tree, None, &opts, &out)
        })
        .await
        .map_err(io::Error::other)??;
        dest
    } else {
        artifact.to_path_buf()
    };
    let mut source = tokio::fs::File::open(&file).await?;

    let (mut conn, code) = open_channel(relay, options).await?;
    on_code(&code);

    let deadline = Instant::now() + options.timeout;
    match next_frame(&mut conn, deadline, options.timeout).await? {
        Some(f) if f.kind == FrameType::Accept && f.payload[..] == *ACCEPT_PAIRED => {}
        Some(f) if f.kind == FrameType::Error => return Err(P2pError::Aborted(f.error_message())),
        Some(f) => return Err(P2pError::Protocol(format!("expected ACCEPT, got {:?}", f.kind))),
        None => return Err(P2pError::Aborted("relay closed the connection".into())),
    }

    let mut hasher = Sha256::new();
    let mut size = 0u64;
    let mut buf = vec![0u8; CHUNK];
    loop {
        let n = read_full(&mut source, &mut buf).await?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        size += n as u64;
        conn.send(Frame::new(FrameType::Data, Bytes::copy_from_slice(&buf[..n])))
            .await
            .map_err(|e| P2pError::Aborted(format!("lost connection while sending: {e}")))?;
    }
    let sha256 = Sha256Digest(hasher.finalize().into());
    conn.send(Frame::new(FrameType::Done, Bytes::copy_from_slice(sha256.as_bytes())))
        .await
        .map_err(|e| P2pError::Aborted(format!("lost connection while sending: {e}")))?;

    let deadline = Instant::now() + options.timeout;
    match next_frame(&mut conn, deadline, options.timeout).await? {
        Some(f) if f.kind == FrameType::Done && f.payload[..] == sha256.as_bytes()[..] => {
            Ok(SendReport { code, sha256, size })
        }
        Some(f) if f.kind == FrameType::Error => Err(P2pError::Rejected(f.error_message())),
        Some(f) => Err(P2pError::Protocol(format!("expected DONE, got {:?}", f.kind))),
        None => Err(P2pError::Aborted("relay closed before delivery was confirmed".into())),
    }
}

/// Registers a code with the relay, picking a fresh one on collision.
async fn open_channel(relay: &str, options: &SendOptions) -> Result<(Conn, TransferCode), P2pError> {
    for _ in 0..CODE_ATTEMPTS {
        let code = options.code.unwrap_or_else(|| TransferCode::generate(&mut rand::rng()));
        let mut conn = connect(relay).await?;
        conn.send(Frame::new(
            FrameType::Open,
            Bytes::copy_from_slice(code.rendezvous_hash().as_bytes()),
        ))
        .await?;
        let deadline = Instant::now() + options.timeout;
        match next_frame(&mut conn, deadline, options.timeout).await? {
            Some(f) if f.kind == FrameType::Accept && f.payload[..] == *ACCEPT_WAITING => return Ok((conn, code)),
            Some(f) if f.kind == FrameType::Error && f.payload[..] == *CHANNEL_IN_USE.as_bytes() => {
                if options.code.is_some() {
                    return Err(P2pError::Collision);
                }
                tracing::debug!("code collision, picking another");
            }
            Some(f) if f.kind == FrameType::Error => return Err(P2pError::Protocol(f.error_message())),
            Some(f) => return Err(P2pError::Protocol(format!("unexpected {:?} after OPEN", f.kind))),
            None => return Err(P2pError::Aborted("relay closed the connection".into())),
        }
    }
    Err(P2pError::Collision)
}

async fn read_full(file: &mut tokio::fs::File, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = file.read(&mut buf[filled..]).await?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

#[derive(Debug, Clone)]
pub struct ReceiveOptions {
    /// Longest wait for the pairing and for each frame after it.
    pub timeout: Duration,
}

impl Default for ReceiveOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReceiveReport {
    pub dest: PathBuf,
    pub sha256: Sha256Digest,
    pub size: u64,
}

/// Claims `code` on the relay, verifies the stream and unpacks it to `dest`.
pub async fn receive(
    code: &TransferCode,
    dest: &Path,
    relay: &str,
    options: &ReceiveOptions,
) -> Result<ReceiveReport, P2pError> {
    if dest.is_file() || (dest.is_dir() && std::fs::read_dir(dest)?.next().is_some()) {
        return Err(P2pError::DestinationExists(dest.to_path_buf()));
    }
    let parent = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    tokio::fs::create_dir_all(&parent).await?;

    let mut conn = connect(relay).await?;
    conn.send(Frame::new(
        FrameType::Claim,
        Bytes::copy_from_slice(code.rendezvous_hash().as_bytes()),
    ))
    .await?;
    let timeout = options.timeout;
    match next_frame(&mut conn, Instant::now() + timeout, timeout).await? {
        Some(f) if f.kind == FrameType::Accept && f.payload[..] == *ACCEPT_PAIRED => {}
        Some(f) if f.kind == FrameType::Error && f.payload[..] == *NO_SUCH_CHANNEL.as_bytes() => {
            return Err(P2pError::NoSuchChannel)
        }
        Some(f) if f.kind == FrameType::Error => return Err(P2pError::Aborted(f.error_message())),
        Some(f) => return Err(P2pError::Protocol(format!("expected ACCEPT, got {:?}", f.kind))),
        None => return Err(P2pError::NoSuchChannel),
    }

    // Dropping `partial` on any early return removes the incomplete data.
    let partial = tempfile::Builder::new().prefix(".receive-").tempfile_in(&parent)?;
    let mut out = tokio::fs::File::from_std(partial.as_file().try_clone()?);
    let mut hasher = Sha256::new();
    let mut size = 0u64;
    let announced = loop {
        match next_frame(&mut conn, Instant::now() + timeout, timeout).await? {
            Some(f) if f.kind == FrameType::Data => {
                hasher.update(&f.payload);
                size += f.payload.len() as u64;
                out.write_all(&f.payload).await?;
            }
            Some(f) if f.kind == FrameType::Done => {
                break Sha256Digest(f.payload[..].try_into().expect("codec enforces digest length"));
            }
            Some(f) if f.kind == FrameType::Error => return Err(P2pError::Aborted(f.error_message())),
            Some(f) => {
                let _ = conn.send(Frame::error("unexpected frame")).await;
                return Err(P2pError::Protocol(format!("unexpected {:?} during transfer", f.kind)));
            }
            None => return Err(P2pError::Aborted("relay closed the connection mid-transfer".into())),
        }
    };
    out.flush().await?;
    drop(out);
    let actual = Sha256Digest(hasher.finalize().into());
    if actual != announced {
        let _ = conn.send(Frame::error("integrity check failed")).await;
        return Err(P2pError::Integrity {
            expected: announced,
            actual,
        });
    }

    let (archive_path, target) = (partial.path().to_path_buf(), dest.to_path_buf());
    let unpacked = tokio::task::spawn_blocking(move || archive::unpack(&archive_path, &target))
        .await
        .map_err(io::Error::other)?;
    if let Err(e) = unpacked {
        let _ = conn
            .send(Frame::error(&format!("receiver could not unpack: {e}")))
            .await;
        return Err(e.into());
    }
    conn.send(Frame::new(FrameType::Done, Bytes::copy_from_slice(actual.as_bytes())))
        .await?;
    Ok(ReceiveReport {
        dest: dest.to_path_buf(),
        sha256: actual,
        size,
    })
}
