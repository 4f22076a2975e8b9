//! Publisher/subscriber client: the client half of the two-step
//! handshake, payload encryption before send, and decryption on
//! receive. One session per connection; publishing and receiving may
//! run concurrently on the same session.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rsa::pkcs8::DecodePublicKey;
use rsa::RsaPublicKey;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};
use tokio_rustls::TlsConnector;

use crate::crypto::{self, CryptoError, SymmetricKey, KEY_LEN};
use crate::protocol::{
    read_packet, write_packet, ClientId, EncryptedEnvelope, ErrorCode, Packet, ProtocolError,
    TopicName, ACK_PREFIX,
};
use crate::tls::{self, TlsError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("broker rejected the handshake: {0}")]
    HandshakeRejected(ErrorCode),

    #[error("handshake ACK did not verify; the trusted side does not hold our key")]
    AckMismatch,

    #[error("broker rejected the request: {0}")]
    Rejected(ErrorCode),

    #[error("unexpected packet: {0}")]
    UnexpectedPacket(&'static str),

    #[error("connection closed")]
    Closed,

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Tls(#[from] TlsError),

    #[error(transparent)]
    Crypto(#[from] CryptoError),

    #[error("key file error: {0}")]
    KeyFile(String),

    #[error("broker public key error: {0}")]
    BrokerKey(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the client's symmetric key comes from.
#[derive(Debug, Clone)]
pub enum KeySource {
    /// Generate a fresh random key for this session.
    Fresh,
    /// Load the key from a file, generating and saving it on first use.
    File(PathBuf),
    /// Use this exact key (in-process callers).
    Key(SymmetricKey),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Broker address as `host:port`.
    pub broker_addr: String,
    /// Root certificate to verify the broker against; `None` connects
    /// over plain TCP (only meaningful against a vanilla-mode broker).
    pub ca_path: Option<PathBuf>,
    /// TLS server name; defaults to the host part of `broker_addr`.
    pub tls_server_name: Option<String>,
    /// Path to the broker's exported public key PEM.
    pub broker_pubkey_path: PathBuf,
    pub client_id: ClientId,
    pub key: KeySource,
}

/// One message delivered to a subscriber, already decrypted.
#[derive(Debug)]
pub struct Received {
    pub topic: TopicName,
    pub plaintext: Vec<u8>,
    pub received_at: Instant,
}

struct SessionInner {
    client_id: ClientId,
    key: SymmetricKey,
    out_tx: mpsc::UnboundedSender<Packet>,
    ctrl_rx: Mutex<mpsc::UnboundedReceiver<Packet>>,
    msg_rx: Mutex<mpsc::UnboundedReceiver<(TopicName, EncryptedEnvelope, Instant)>>,
    bad_padding: AtomicU64,
}

/// Established session: connected, authenticated, key provisioned.
#[derive(Clone)]
pub struct Session {
    inner: Arc<SessionInner>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("client_id", &self.inner.client_id)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn client_id(&self) -> &ClientId {
        &self.inner.client_id
    }

    pub fn key(&self) -> &SymmetricKey {
        &self.inner.key
    }

    /// Messages skipped because they did not decrypt under our key.
    pub fn bad_padding_count(&self) -> u64 {
        self.inner.bad_padding.load(Ordering::Relaxed)
    }

    /// Encrypt under our key and send. Errors the broker replies with
    /// arrive asynchronously; see [`Session::next_error`].
    pub fn publish(&self, topic: &TopicName, plaintext: &[u8]) -> Result<(), ClientError> {
        let envelope = crypto::encrypt_payload(&self.inner.key, plaintext);
        self.inner
            .out_tx
            .send(Packet::Publish {
                topic: topic.clone(),
                envelope,
            })
            .map_err(|_| ClientError::Closed)
    }

    /// Subscribe and wait for the broker's verdict.
    pub async fn subscribe(&self, topic: &TopicName) -> Result<(), ClientError> {
        self.inner
            .out_tx
            .send(Packet::Subscribe {
                topic: topic.clone(),
            })
            .map_err(|_| ClientError::Closed)?;
        let mut ctrl = self.inner.ctrl_rx.lock().await;
        match ctrl.recv().await {
            Some(Packet::SubAck { .. }) => Ok(()),
            Some(Packet::Error { code }) => Err(ClientError::Rejected(code)),
            Some(_) => Err(ClientError::UnexpectedPacket("awaiting SUBACK")),
            None => Err(ClientError::Closed),
        }
    }

    /// Next decrypted message. Undecryptable envelopes are counted and
    /// skipped. `None` when the connection is gone.
    pub async fn next_message(&self) -> Option<Received> {
        let mut rx = self.inner.msg_rx.lock().await;
        loop {
            let (topic, envelope, received_at) = rx.recv().await?;
            match crypto::decrypt_payload(&self.inner.key, &envelope) {
                Ok(plaintext) => {
                    return Some(Received {
                        topic,
                        plaintext,
                        received_at,
                    })
                }
                Err(_) => {
                    self.inner.bad_padding.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    /// Wait up to `timeout` for an asynchronous broker ERROR.
    pub async fn next_error(&self, timeout: std::time::Duration) -> Option<ErrorCode> {
        let mut ctrl = self.inner.ctrl_rx.lock().await;
        match tokio::time::timeout(timeout, ctrl.recv()).await {
            Ok(Some(Packet::Error { code })) => Some(code),
            _ => None,
        }
    }
}

/// Load or create the client key per the configured source.
fn resolve_key(source: &KeySource) -> Result<SymmetricKey, ClientError> {
    match source {
        KeySource::Fresh => Ok(SymmetricKey::generate()),
        KeySource::Key(k) => Ok(k.clone()),
        KeySource::File(path) => {
            if path.exists() {
                let bytes = std::fs::read(path)?;
                let bytes: [u8; KEY_LEN] = bytes
                    .try_into()
                    .map_err(|_| ClientError::KeyFile(format!("{} is not exactly 32 bytes", path.display())))?;
                Ok(SymmetricKey::from_bytes(bytes))
            } else {
                let key = SymmetricKey::generate();
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, key.as_bytes())?;
                Ok(key)
            }
        }
    }
}

fn load_broker_pubkey(path: &std::path::Path) -> Result<RsaPublicKey, ClientError> {
    let pem = std::fs::read_to_string(path)
        .map_err(|e| ClientError::BrokerKey(format!("{}: {e}", path.display())))?;
    RsaPublicKey::from_public_key_pem(&pem)
        .map_err(|e| ClientError::BrokerKey(format!("{}: {e}", path.display())))
}

/// A connected transport with no session semantics; also the protocol
/// surface tests drive directly.
pub struct RawConn {
    stream: Box<dyn Stream>,
}

trait Stream: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Stream for T {}

impl RawConn {
    pub async fn send(&mut self, packet: &Packet) -> Result<(), ProtocolError> {
        write_packet(&mut self.stream, packet).await
    }

    pub async fn recv(&mut self) -> Result<Packet, ProtocolError> {
        read_packet(&mut self.stream).await
    }
}

/// Open the transport: TCP, then TLS when a trust root is configured.
/// Broker authentication happens here, against exactly that root.
pub async fn raw_connect(
    broker_addr: &str,
    ca_path: Option<&std::path::Path>,
    tls_server_name: Option<&str>,
) -> Result<RawConn, ClientError> {
    let tcp = TcpStream::connect(broker_addr).await?;
    tcp.set_nodelay(true)?;
    match ca_path {
        None => Ok(RawConn {
            stream: Box::new(tcp),
        }),
        Some(ca) => {
            let config = tls::client_config(ca)?;
            let host = match tls_server_name {
                Some(name) => name.to_string(),
                None => broker_addr
                    .rsplit_once(':')
                    .map(|(h, _)| h.to_string())
                    .unwrap_or_else(|| broker_addr.to_string()),
            };
            let connector = TlsConnector::from(config);
            let stream = connector.connect(tls::server_name(&host)?, tcp).await?;
            Ok(RawConn {
                stream: Box::new(stream),
            })
        }
    }
}

/// Connect, authenticate the broker, and run the client half of the
/// two-step handshake: CONNECT, then the wrapped key, then verification
/// of the encrypted ACK against our own id.
pub async fn connect(cfg: &ClientConfig) -> Result<Session, ClientError> {
    let key = resolve_key(&cfg.key)?;
    let broker_pubkey = load_broker_pubkey(&cfg.broker_pubkey_path)?;
    let mut conn = raw_connect(
        &cfg.broker_addr,
        cfg.ca_path.as_deref(),
        cfg.tls_server_name.as_deref(),
    )
    .await?;

    conn.send(&Packet::Connect {
        client_id: cfg.client_id.clone(),
    })
    .await?;
    match conn.recv().await? {
        Packet::ConnAck => {}
        Packet::Error { code } => return Err(ClientError::HandshakeRejected(code)),
        _ => return Err(ClientError::UnexpectedPacket("awaiting CONNACK")),
    }

    let wrapped = crypto::wrap_client_key(&broker_pubkey, &key)?;
    conn.send(&Packet::HandshakeReq {
        wrapped_key: wrapped.into_bytes(),
    })
    .await?;
    let ack_envelope = match conn.recv().await? {
        Packet::HandshakeAck { envelope } => envelope,
        Packet::Error { code } => return Err(ClientError::HandshakeRejected(code)),
        _ => return Err(ClientError::UnexpectedPacket("awaiting HANDSHAKE_ACK")),
    };

    // The ACK must decrypt under our key and name us; anything else
    // means whoever holds the broker's endpoint does not hold our key.
    let expected = format!("{ACK_PREFIX}{}", cfg.client_id);
    match crypto::decrypt_payload(&key, &ack_envelope) {
        Ok(plaintext) if plaintext == expected.as_bytes() => {}
        _ => return Err(ClientError::AckMismatch),
    }

    // Split into writer and reader tasks.
    let RawConn { stream } = conn;
    let (mut read_half, mut write_half) = tokio::io::split(stream);

    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Packet>();
    tokio::spawn(async move {
        while let Some(packet) = out_rx.recv().await {
            if write_packet(&mut write_half, &packet).await.is_err() {
                break;
            }
        }
        // Session dropped: send close_notify so the broker tears the
        // session down promptly instead of waiting on a dead socket.
        use tokio::io::AsyncWriteExt;
        let _ = write_half.shutdown().await;
    });

    let (ctrl_tx, ctrl_rx) = mpsc::unbounded_channel();
    let (msg_tx, msg_rx) = mpsc::unbounded_channel();
    tokio::spawn(async move {
        loop {
            match read_packet(&mut read_half).await {
                Ok(Packet::Message { topic, envelope }) => {
                    if msg_tx.send((topic, envelope, Instant::now())).is_err() {
                        break;
                    }
                }
                Ok(packet) => {
                    if ctrl_tx.send(packet).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });

    Ok(Session {
        inner: Arc::new(SessionInner {
            client_id: cfg.client_id.clone(),
            key,
            out_tx,
            ctrl_rx: Mutex::new(ctrl_rx),
            msg_rx: Mutex::new(msg_rx),
            bad_padding: AtomicU64::new(0),
        }),
    })
}
