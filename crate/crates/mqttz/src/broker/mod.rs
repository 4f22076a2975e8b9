//! The untrusted broker engine: TLS sessions, handshake orchestration,
//! ACL enforcement, the subscription table, and per-subscriber fan-out
//! through trusted re-encryption. Every payload this module touches is
//! an [`EncryptedEnvelope`]; plaintext exists only on the far side of
//! the trusted gateway.

pub mod acl;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio_rustls::TlsAcceptor;

use crate::crypto::{self, BrokerKeyPair, HukSeed, SymmetricKey, WrappedKey};
use crate::events::{BufferTap, EventLog};
use crate::protocol::{
    encode_packet, read_packet, write_packet, ClientId, EncryptedEnvelope, ErrorCode, Packet,
    ProtocolError, TopicName,
};
use crate::tls;
use crate::trusted::{GatewayHandle, TrustedConfig, TrustedError, TrustedGateway, TrustedStats};

use acl::{AclError, AclTable, Action};

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Tls(#[from] tls::TlsError),

    #[error(transparent)]
    Acl(#[from] AclError),

    #[error("trusted core failed to start: {0}")]
    Trusted(#[from] TrustedError),

    #[error("crypto failure: {0}")]
    Crypto(#[from] crate::crypto::CryptoError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which re-encryption pipeline the broker runs. `Tee` is the real
/// system; the other two exist to reproduce baseline measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerMode {
    /// Forward the publisher's envelope unchanged (no re-encryption).
    Vanilla,
    /// Re-encrypt in the untrusted engine with keys held in its memory.
    Ree,
    /// Re-encrypt through the serialized trusted gateway.
    Tee,
}

impl std::str::FromStr for BrokerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(BrokerMode::Vanilla),
            "ree" => Ok(BrokerMode::Ree),
            "tee" => Ok(BrokerMode::Tee),
            other => Err(format!("unknown mode `{other}` (vanilla|ree|tee)")),
        }
    }
}

impl std::fmt::Display for BrokerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BrokerMode::Vanilla => "vanilla",
            BrokerMode::Ree => "ree",
            BrokerMode::Tee => "tee",
        })
    }
}

pub struct BrokerConfig {
    pub listen: SocketAddr,
    /// Certificate and private key paths. Required unless the broker
    /// runs in the plaintext-forward benchmark mode.
    pub tls: Option<(PathBuf, PathBuf)>,
    pub acl_path: PathBuf,
    pub store_dir: PathBuf,
    pub cache_capacity: usize,
    pub export_pubkey: Option<PathBuf>,
    pub mode: BrokerMode,
    /// Device seed; `None` reads `MQTTZ_HUK_SEED` from the environment.
    pub huk_seed: Option<HukSeed>,
    pub events: EventLog,
    /// Isolation-audit taps; `None` outside instrumented tests.
    pub dispatch_tap: Option<BufferTap>,
    pub trusted_tap: Option<BufferTap>,
}

/// Re-encryption path selected by the mode.
enum CryptoPath {
    Tee(GatewayHandle),
    /// Baseline: keys unwrapped and kept in untrusted memory.
    Ree(Box<ReeCore>),
}

struct ReeCore {
    keypair: BrokerKeyPair,
    keys: Mutex<HashMap<String, SymmetricKey>>,
}

impl ReeCore {
    fn provision(&self, id: &ClientId, wrapped: &WrappedKey) -> Result<EncryptedEnvelope, TrustedError> {
        let key = crypto::unwrap_client_key(self.keypair.private_key(), wrapped)
            .map_err(|_| TrustedError::UnwrapFailed)?;
        let ack = format!("{}{id}", crate::protocol::ACK_PREFIX);
        let env = crypto::encrypt_payload(&key, ack.as_bytes());
        self.keys
            .lock()
            .expect("ree key table lock")
            .insert(id.as_str().to_string(), key);
        Ok(env)
    }

    fn reencrypt(
        &self,
        origin: &ClientId,
        dest: &ClientId,
        env: &EncryptedEnvelope,
    ) -> Result<EncryptedEnvelope, TrustedError> {
        let keys = self.keys.lock().expect("ree key table lock");
        let dec_key = keys
            .get(origin.as_str())
            .ok_or_else(|| TrustedError::NoKey(origin.clone()))?
            .clone();
        let enc_key = keys
            .get(dest.as_str())
            .ok_or_else(|| TrustedError::NoKey(dest.clone()))?
            .clone();
        drop(keys);
        let plaintext =
            crypto::decrypt_payload(&dec_key, env).map_err(|_| TrustedError::BadPadding)?;
        Ok(crypto::encrypt_payload(&enc_key, &plaintext))
    }
}

struct SessionSlot {
    token: u64,
    outbound: mpsc::UnboundedSender<Packet>,
}

struct BrokerState {
    mode: BrokerMode,
    acl: RwLock<AclTable>,
    acl_path: PathBuf,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    subscriptions: Mutex<HashMap<String, Vec<String>>>,
    path: CryptoPath,
    events: EventLog,
    tap: Option<BufferTap>,
    session_tokens: AtomicU64,
}

impl BrokerState {
    fn tap_packet(&self, packet: &Packet) {
        if let Some(tap) = &self.tap {
            if let Ok(frame) = encode_packet(packet) {
                tap.record(&frame);
            }
        }
    }

    fn tap_envelope(&self, env: &EncryptedEnvelope) {
        if let Some(tap) = &self.tap {
            tap.record(&env.iv);
            tap.record(&env.ciphertext);
        }
    }
}

/// Running broker; dropping the handle does not stop it, call
/// [`BrokerHandle::shutdown`].
pub struct BrokerHandle {
    addr: SocketAddr,
    state: Arc<BrokerState>,
    shutdown_tx: watch::Sender<bool>,
    serve_done: oneshot::Receiver<()>,
}

impl std::fmt::Debug for BrokerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrokerHandle")
            .field("addr", &self.addr)
            .finish_non_exhaustive()
    }
}

impl BrokerHandle {
    /// Actual bound address (useful when listening on port 0).
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Re-read the ACL file and swap the table; subsequent operations
    /// see the new permissions immediately.
    pub fn reload_acl(&self) -> Result<(), AclError> {
        let table = AclTable::load(&self.state.acl_path)?;
        *self.state.acl.write().expect("acl lock") = table;
        self.state.events.emit("acl_reloaded", &[]);
        Ok(())
    }

    /// Counter snapshot from the trusted core (`None` outside tee mode).
    pub async fn trusted_stats(&self) -> Option<TrustedStats> {
        match &self.state.path {
            CryptoPath::Tee(gateway) => gateway.stats().await.ok(),
            CryptoPath::Ree(_) => None,
        }
    }

    /// Stop accepting, drop sessions, flush the trusted cache.
    pub async fn shutdown(self) {
        let _ = self.shutdown_tx.send(true);
        let _ = self.serve_done.await;
        if let CryptoPath::Tee(gateway) = &self.state.path {
            let _ = gateway.flush().await;
        }
    }
}

/// Bind, start serving in background tasks, and return a handle.
pub async fn start_broker(config: BrokerConfig) -> Result<BrokerHandle, BrokerError> {
    let seed = match config.huk_seed {
        Some(seed) => seed,
        None => HukSeed::from_env()?,
    };

    let acceptor = match (&config.tls, config.mode) {
        (Some((cert, key)), _) => Some(TlsAcceptor::from(tls::server_config(cert, key)?)),
        (None, BrokerMode::Vanilla) => None,
        (None, mode) => {
            return Err(BrokerError::Config(format!(
                "tls certificate and key are required in {mode} mode"
            )));
        }
    };

    let acl = AclTable::load(&config.acl_path)?;

    let path = match config.mode {
        BrokerMode::Tee => CryptoPath::Tee(TrustedGateway::spawn(TrustedConfig {
            store_dir: config.store_dir.clone(),
            huk_seed: seed,
            cache_capacity: config.cache_capacity,
            events: config.events.clone(),
            tap: config.trusted_tap.clone(),
        })?),
        BrokerMode::Ree | BrokerMode::Vanilla => CryptoPath::Ree(Box::new(ReeCore {
            keypair: BrokerKeyPair::generate()?,
            keys: Mutex::new(HashMap::new()),
        })),
    };

    // Bring up (or unseal) the broker key pair now: a store sealed under
    // a different seed must abort startup, not first handshake.
    let pem = match &path {
        CryptoPath::Tee(gateway) => gateway
            .public_key_pem()
            .await
            .map_err(BrokerError::Trusted)?,
        CryptoPath::Ree(ree) => ree.keypair.public_key_pem(),
    };
    if let Some(pubkey_path) = &config.export_pubkey {
        if let Some(parent) = pubkey_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(pubkey_path, pem)?;
    }

    let listener = TcpListener::bind(config.listen).await?;
    let addr = listener.local_addr()?;

    let state = Arc::new(BrokerState {
        mode: config.mode,
        acl: RwLock::new(acl),
        acl_path: config.acl_path,
        sessions: Mutex::new(HashMap::new()),
        subscriptions: Mutex::new(HashMap::new()),
        path,
        events: config.events,
        tap: config.dispatch_tap,
        session_tokens: AtomicU64::new(0),
    });

    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let (done_tx, done_rx) = oneshot::channel();
    state
        .events
        .emit("listening", &[("addr", &addr.to_string()), ("mode", &config.mode.to_string())]);

    tokio::spawn(accept_loop(
        listener,
        acceptor,
        state.clone(),
        shutdown_rx,
        done_tx,
    ));

    Ok(BrokerHandle {
        addr,
        state,
        shutdown_tx,
        serve_done: done_rx,
    })
}

/// Serve until SIGTERM/SIGINT, reloading the ACL on SIGHUP. This is the
/// CLI entry point; per-session failures never take the broker down.
pub async fn run_broker(config: BrokerConfig) -> Result<(), BrokerError> {
    let handle = start_broker(config).await?;
    let mut sighup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
    let mut sigterm = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())?;
    loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => break,
            _ = sigterm.recv() => break,
            _ = sighup.recv() => {
                if let Err(e) = handle.reload_acl() {
                    handle.state.events.emit("acl_reload_failed", &[("error", &e.to_string())]);
                }
            }
        }
    }
    handle.shutdown().await;
    Ok(())
}

async fn accept_loop(
    listener: TcpListener,
    acceptor: Option<TlsAcceptor>,
    state: Arc<BrokerState>,
    mut shutdown: watch::Receiver<bool>,
    _done: oneshot::Sender<()>,
) {
    loop {
        let conn = tokio::select! {
            _ = shutdown.changed() => break,
            conn = listener.accept() => conn,
        };
        let (stream, peer) = match conn {
            Ok(c) => c,
            Err(e) => {
                state
                    .events
                    .emit("accept_failed", &[("error", &e.to_string())]);
                continue;
            }
        };
        let state = state.clone();
        let acceptor = acceptor.clone();
        let shutdown = shutdown.clone();
        tokio::spawn(async move {
            match acceptor {
                Some(acceptor) => match acceptor.accept(stream).await {
                    Ok(tls_stream) => serve_session(state, tls_stream, shutdown).await,
                    Err(e) => {
                        state
                            .events
                            .emit("tls_accept_failed", &[("peer", &peer.to_string()), ("error", &e.to_string())]);
                    }
                },
                None => serve_session(state, stream, shutdown).await,
            }
        });
    }
}

struct Session {
    id: ClientId,
    token: u64,
    handshake_complete: bool,
}

async fn serve_session<S>(state: Arc<BrokerState>, stream: S, mut shutdown: watch::Receiver<bool>)
where
    S: AsyncRead + AsyncWrite + Send + 'static,
{
    let (mut reader, mut writer) = tokio::io::split(stream);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Packet>();

    let writer_state = state.clone();
    let writer_task = tokio::spawn(async move {
        while let Some(packet) = out_rx.recv().await {
            writer_state.tap_packet(&packet);
            if write_packet(&mut writer, &packet).await.is_err() {
                break;
            }
        }
    });

    // First frame must be CONNECT with a free client id.
    let session = {
        let packet = tokio::select! {
            _ = shutdown.changed() => None,
            p = read_packet(&mut reader) => match p {
                Ok(p) => Some(p),
                Err(ProtocolError::ConnectionClosed) | Err(ProtocolError::Io(_)) => None,
                Err(_) => {
                    let _ = out_tx.send(Packet::Error {
                        code: ErrorCode::Malformed,
                    });
                    None
                }
            },
        };
        let Some(packet) = packet else {
            drop(out_tx);
            let _ = writer_task.await;
            return;
        };
        state.tap_packet(&packet);
        match packet {
            Packet::Connect { client_id } => {
                let token = state.session_tokens.fetch_add(1, Ordering::Relaxed);
                let registered = {
                    let mut sessions = state.sessions.lock().expect("sessions lock");
                    if sessions.contains_key(client_id.as_str()) {
                        false
                    } else {
                        sessions.insert(
                            client_id.as_str().to_string(),
                            SessionSlot {
                                token,
                                outbound: out_tx.clone(),
                            },
                        );
                        true
                    }
                };
                if !registered {
                    state
                        .events
                        .emit("duplicate_connect", &[("client", client_id.as_str())]);
                    let _ = out_tx.send(Packet::Error {
                        code: ErrorCode::Unauthorized,
                    });
                    drop(out_tx);
                    let _ = writer_task.await;
                    return;
                }
                let _ = out_tx.send(Packet::ConnAck);
                Session {
                    id: client_id,
                    token,
                    handshake_complete: false,
                }
            }
            _ => {
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::Malformed,
                });
                drop(out_tx);
                let _ = writer_task.await;
                return;
            }
        }
    };

    let mut session = session;
    loop {
        let result = tokio::select! {
            _ = shutdown.changed() => break,
            p = read_packet(&mut reader) => p,
        };
        let packet = match result {
            Ok(p) => p,
            Err(ProtocolError::ConnectionClosed) => break,
            Err(ProtocolError::Io(_)) => break,
            Err(_) => {
                // Framing is lost after a malformed frame; report and drop.
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::Malformed,
                });
                break;
            }
        };
        state.tap_packet(&packet);
        match packet {
            Packet::HandshakeReq { wrapped_key } => {
                handle_handshake(&state, &mut session, *wrapped_key, &out_tx).await;
            }
            Packet::Subscribe { topic } => {
                handle_subscribe(&state, &session, topic, &out_tx);
            }
            Packet::Publish { topic, envelope } => {
                handle_publish(&state, &session, topic, envelope, &out_tx).await;
            }
            _ => {
                // CONNECT repeats and client-bound kinds are protocol misuse.
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::Malformed,
                });
                break;
            }
        }
    }

    remove_session(&state, &session);
    drop(out_tx);
    let _ = writer_task.await;
}

fn remove_session(state: &BrokerState, session: &Session) {
    let mut sessions = state.sessions.lock().expect("sessions lock");
    // Only remove our own registration; a newer session may have reused
    // the id after we were replaced by a disconnect race.
    if sessions
        .get(session.id.as_str())
        .is_some_and(|slot| slot.token == session.token)
    {
        sessions.remove(session.id.as_str());
    }
    drop(sessions);
    let mut subs = state.subscriptions.lock().expect("subscriptions lock");
    for list in subs.values_mut() {
        list.retain(|id| id != session.id.as_str());
    }
    subs.retain(|_, list| !list.is_empty());
}

async fn handle_handshake(
    state: &Arc<BrokerState>,
    session: &mut Session,
    wrapped_key: [u8; crate::protocol::WRAPPED_KEY_LEN],
    out_tx: &mpsc::UnboundedSender<Packet>,
) {
    // A client with no ACL stanza at all cannot provision a key.
    if !state
        .acl
        .read()
        .expect("acl lock")
        .knows_client(&session.id)
    {
        state
            .events
            .emit("handshake_denied", &[("client", session.id.as_str())]);
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }

    let wrapped = WrappedKey::from_bytes(Box::new(wrapped_key));
    let result = match &state.path {
        CryptoPath::Tee(gateway) => gateway.provision(session.id.clone(), wrapped).await,
        CryptoPath::Ree(ree) => ree.provision(&session.id, &wrapped),
    };
    match result {
        Ok(envelope) => {
            session.handshake_complete = true;
            state
                .events
                .emit("handshake_ok", &[("client", session.id.as_str())]);
            state.tap_envelope(&envelope);
            let _ = out_tx.send(Packet::HandshakeAck { envelope });
        }
        Err(e) => {
            state.events.emit(
                "handshake_failed",
                &[("client", session.id.as_str()), ("error", &e.to_string())],
            );
            let _ = out_tx.send(Packet::Error {
                code: ErrorCode::Internal,
            });
        }
    }
}

fn handle_subscribe(
    state: &Arc<BrokerState>,
    session: &Session,
    topic: TopicName,
    out_tx: &mpsc::UnboundedSender<Packet>,
) {
    if !session.handshake_complete {
        state
            .events
            .emit("gate_deny", &[("client", session.id.as_str()), ("op", "subscribe")]);
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }
    // The provisioning topic is never subscribable, ACLs notwithstanding.
    if topic.is_reserved() {
        state
            .events
            .emit("reserved_topic_deny", &[("client", session.id.as_str())]);
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }
    if !state
        .acl
        .read()
        .expect("acl lock")
        .authorize(&session.id, &topic, Action::Read)
    {
        state.events.emit(
            "auth_deny",
            &[
                ("client", session.id.as_str()),
                ("topic", topic.as_str()),
                ("action", "read"),
            ],
        );
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }

    let mut subs = state.subscriptions.lock().expect("subscriptions lock");
    let list = subs.entry(topic.as_str().to_string()).or_default();
    if !list.iter().any(|id| id == session.id.as_str()) {
        list.push(session.id.as_str().to_string());
    }
    drop(subs);
    let _ = out_tx.send(Packet::SubAck { topic });
}

async fn handle_publish(
    state: &Arc<BrokerState>,
    session: &Session,
    topic: TopicName,
    envelope: EncryptedEnvelope,
    out_tx: &mpsc::UnboundedSender<Packet>,
) {
    if !session.handshake_complete {
        state
            .events
            .emit("gate_deny", &[("client", session.id.as_str()), ("op", "publish")]);
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }
    if !state
        .acl
        .read()
        .expect("acl lock")
        .authorize(&session.id, &topic, Action::Write)
    {
        state.events.emit(
            "auth_deny",
            &[
                ("client", session.id.as_str()),
                ("topic", topic.as_str()),
                ("action", "write"),
            ],
        );
        let _ = out_tx.send(Packet::Error {
            code: ErrorCode::Unauthorized,
        });
        return;
    }

    state.tap_envelope(&envelope);

    // Snapshot the subscriber list at dispatch time; fan-out follows
    // subscription order.
    let subscribers: Vec<String> = state
        .subscriptions
        .lock()
        .expect("subscriptions lock")
        .get(topic.as_str())
        .cloned()
        .unwrap_or_default();

    for sub_id in subscribers {
        let outbound = {
            let sessions = state.sessions.lock().expect("sessions lock");
            sessions.get(&sub_id).map(|slot| slot.outbound.clone())
        };
        let Some(outbound) = outbound else {
            continue; // subscriber disconnected between snapshot and send
        };
        let dest = ClientId::new(sub_id.as_str()).expect("registered ids are valid");

        let out_env = match state.mode {
            BrokerMode::Vanilla => Ok(envelope.clone()),
            BrokerMode::Ree => match &state.path {
                CryptoPath::Ree(ree) => ree.reencrypt(&session.id, &dest, &envelope),
                CryptoPath::Tee(_) => unreachable!("ree mode uses the ree path"),
            },
            BrokerMode::Tee => match &state.path {
                CryptoPath::Tee(gateway) => gateway
                    .reencrypt(session.id.clone(), dest.clone(), envelope.clone())
                    .await
                    .map(|(env, _timing)| env),
                CryptoPath::Ree(_) => unreachable!("tee mode uses the gateway"),
            },
        };

        match out_env {
            Ok(out_env) => {
                state.tap_envelope(&out_env);
                let _ = outbound.send(Packet::Message {
                    topic: topic.clone(),
                    envelope: out_env,
                });
            }
            Err(TrustedError::NoKey(id)) => {
                // Skip this subscriber, keep serving the rest, and tell
                // the publisher a recipient was dropped.
                state.events.emit(
                    "no_key_skip",
                    &[("publisher", session.id.as_str()), ("subscriber", id.as_str())],
                );
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::NoKey,
                });
            }
            Err(TrustedError::BadPadding) => {
                // The publisher's own envelope is undecryptable; every
                // remaining subscriber would fail the same way.
                state.events.emit(
                    "publish_bad_envelope",
                    &[("publisher", session.id.as_str()), ("topic", topic.as_str())],
                );
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::Internal,
                });
                return;
            }
            Err(e) => {
                state.events.emit(
                    "reencrypt_failed",
                    &[("publisher", session.id.as_str()), ("error", &e.to_string())],
                );
                let _ = out_tx.send(Packet::Error {
                    code: ErrorCode::Internal,
                });
            }
        }
    }
}
