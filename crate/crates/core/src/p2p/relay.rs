//! Rendezvous relay: pairs the connection that OPENed a code hash with the
//! one that CLAIMs it, then pipes frames between them. Nothing is written
//! to disk, and a hash is forgotten as soon as it is claimed.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;

use super::frame::{Frame, FrameCodec, FrameType};

pub type Conn = Framed<TcpStream, FrameCodec>;

/// ACCEPT payload confirming an OPEN was registered.
pub const ACCEPT_WAITING: &[u8] = &[0];
/// ACCEPT payload sent to both ends once paired.
pub const ACCEPT_PAIRED: &[u8] = &[1];

pub const NO_SUCH_CHANNEL: &str = "no such channel";
pub const CHANNEL_IN_USE: &str = "channel already open";
pub const PEER_DISCONNECTED: &str = "peer disconnected";

const HELLO_TIMEOUT: Duration = Duration::from_secs(30);

struct Waiting {
    id: u64,
    tx: oneshot::Sender<Conn>,
}

#[derive(Default)]
struct RelayState {
    channels: Mutex<HashMap<[u8; 32], Waiting>>,
    next_id: AtomicU64,
}

impl RelayState {
    fn open_channels(&self) -> usize {
        self.channels.lock().expect("relay state poisoned").len()
    }
}

pub struct RelayHandle {
    addr: SocketAddr,
    state: Arc<RelayState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl RelayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Codes currently waiting for a receiver.
    pub fn open_channels(&self) -> usize {
        self.state.open_channels()
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

pub async fn relay_serve(addr: SocketAddr) -> io::Result<RelayHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let state = Arc::new(RelayState::default());
    let (tx, mut rx) = oneshot::channel::<()>();
    let accept_state = state.clone();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = &mut rx => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let state = accept_state.clone();
                        tokio::spawn(async move {
                            let _ = stream.set_nodelay(true);
                            if let Err(e) = handle_conn(state, Framed::new(stream, FrameCodec)).await {
                                tracing::debug!(%peer, error = %e, "relay connection ended");
                            }
                        });
                    }
                    Err(e) => tracing::warn!(error = %e, "accept failed"),
                },
            }
        }
    });
    tracing::info!(%addr, "relay listening");
    Ok(RelayHandle {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}

async fn handle_conn(state: Arc<RelayState>, mut conn: Conn) -> io::Result<()> {
    let first = match tokio::time::timeout(HELLO_TIMEOUT, conn.next()).await {
        Ok(Some(Ok(frame))) => frame,
        Ok(Some(Err(e))) => {
            let _ = conn.send(Frame::error(&e.to_string())).await;
            return Ok(());
        }
        _ => return Ok(()),
    };
    let hash: [u8; 32] = match first.kind {
        FrameType::Open | FrameType::Claim => first.payload[..].try_into().expect("codec enforces digest length"),
        _ => {
            let _ = conn.send(Frame::error("expected OPEN or CLAIM")).await;
            return Ok(());
        }
    };
    if first.kind == FrameType::Claim {
        let waiting = state.channels.lock().expect("relay state poisoned").remove(&hash);
        let mut conn = match waiting {
            Some(w) => match w.tx.send(conn) {
                Ok(()) => return Ok(()),
                Err(conn) => conn,
            },
            None => conn,
        };
        let _ = conn.send(Frame::error(NO_SUCH_CHANNEL)).await;
        return Ok(());
    }

    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = oneshot::channel();
    let registered = {
        let mut channels = state.channels.lock().expect("relay state poisoned");
        match channels.entry(hash) {
            Entry::Occupied(_) => false,
            Entry::Vacant(slot) => {
                slot.insert(Waiting { id, tx });
                true
            }
        }
    };
    if !registered {
        let _ = conn.send(Frame::error(CHANNEL_IN_USE)).await;
        return Ok(());
    }
    let forget = || {
        let mut channels = state.channels.lock().expect("relay state poisoned");
        if channels.get(&hash).is_some_and(|w| w.id == id) {
            channels.remove(&hash);
        }
    };
    if conn.send(Frame::new(FrameType::Accept, ACCEPT_WAITING)).await.is_err() {
        forget();
        return Ok(());
    }
    let claimer = tokio::select! {
        peer = &mut rx => peer.ok(),
        _ = conn.next() => {
            // The opener hung up (or spoke out of turn) before anyone claimed.
            forget();
            if let Ok(mut peer) = rx.try_recv() {
                let _ = peer.send(Frame::error(PEER_DISCONNECTED)).await;
            }
            return Ok(());
        }
    };
    match claimer {
        Some(claimer) => pipe(conn, claimer).await,
        None => Ok(()),
    }
}

async fn pipe(mut sender: Conn, mut receiver: Conn) -> io::Result<()> {
    let paired = futures::future::join(
        sender.send(Frame::new(FrameType::Accept, ACCEPT_PAIRED)),
        receiver.send(Frame::new(FrameType::Accept, ACCEPT_PAIRED)),
    )
    .await;
    if paired.0.is_err() || paired.1.is_err() {
        let _ = sender.send(Frame::error(PEER_DISCONNECTED)).await;
        let _ = receiver.send(Frame::error(PEER_DISCONNECTED)).await;
        return Ok(());
    }
    loop {
        tokio::select! {
            from_sender = sender.next() => match from_sender {
                Some(Ok(frame)) if frame.kind == FrameType::Data || frame.kind == FrameType::Done => {
                    if receiver.send(frame).await.is_err() {
                        let _ = sender.send(Frame::error(PEER_DISCONNECTED)).await;
                        return Ok(());
                    }
                }
                Some(Ok(frame)) if frame.kind == FrameType::Error => {
                    let _ = receiver.send(frame).await;
                    return Ok(());
                }
                Some(Ok(frame)) => {
                    let msg = format!("unexpected {:?} frame from sender", frame.kind);
                    let _ = sender.send(Frame::error(&msg)).await;
                    let _ = receiver.send(Frame::error(&msg)).await;
                    return Ok(());
                }
                Some(Err(e)) => {
                    let _ = receiver.send(Frame::error(&format!("sender sent a bad frame: {e}"))).await;
                    return Ok(());
                }
                None => {
                    let _ = receiver.send(Frame::error(PEER_DISCONNECTED)).await;
                    return Ok(());
                }
            },
            from_receiver = receiver.next() => match from_receiver {
                Some(Ok(frame)) if frame.kind == FrameType::Done || frame.kind == FrameType::Error => {
                    let _ = sender.send(frame).await;
                    return Ok(());
                }
                Some(Ok(frame)) => {
                    let msg = format!("unexpected {:?} frame from receiver", frame.kind);
                    let _ = sender.send(Frame::error(&msg)).await;
                    let _ = receiver.send(Frame::error(&msg)).await;
                    return Ok(());
                }
                Some(Err(_)) | None => {
                    let _ = sender.send(Frame::error(PEER_DISCONNECTED)).await;
                    return Ok(());
                }
            },
        }
    }
}
