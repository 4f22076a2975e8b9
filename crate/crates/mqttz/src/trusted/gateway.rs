//! Serializing gateway into the trusted core: the software analogue of
//! a world switch. All requests funnel through one queue into a single
//! worker thread that owns the [`TrustedContext`], so trusted execution
//! is strictly one-at-a-time in FIFO order no matter how concurrent the
//! broker is.

use tokio::sync::{mpsc, oneshot};

use crate::crypto::{SymmetricKey, WrappedKey};
use crate::protocol::{ClientId, EncryptedEnvelope};

use super::context::{
    KeyProbe, ReencryptTiming, TrustedConfig, TrustedContext, TrustedError, TrustedStats,
};

enum Request {
    Provision {
        id: ClientId,
        wrapped: WrappedKey,
        reply: oneshot::Sender<Result<EncryptedEnvelope, TrustedError>>,
    },
    Reencrypt {
        origin: ClientId,
        dest: ClientId,
        env: EncryptedEnvelope,
        reply: oneshot::Sender<Result<(EncryptedEnvelope, ReencryptTiming), TrustedError>>,
    },
    Stats {
        reply: oneshot::Sender<TrustedStats>,
    },
    PublicKeyPem {
        reply: oneshot::Sender<Result<String, TrustedError>>,
    },
    Preload {
        keys: Vec<(ClientId, SymmetricKey)>,
        reply: oneshot::Sender<Result<(), TrustedError>>,
    },
    ProbeKey {
        id: ClientId,
        reply: oneshot::Sender<Result<KeyProbe, TrustedError>>,
    },
    Flush {
        reply: oneshot::Sender<Result<(), TrustedError>>,
    },
}

/// Cloneable caller-side handle. Every method is an async call that
/// blocks in queue order behind earlier trusted operations. The worker
/// thread exits when the last handle is dropped.
#[derive(Clone)]
pub struct GatewayHandle {
    tx: mpsc::UnboundedSender<Request>,
}

/// Namespace for bringing the gateway up.
pub struct TrustedGateway;

impl TrustedGateway {
    /// Bring up the trusted context (generating or unsealing the broker
    /// key pair) and start the serialized worker.
    pub fn spawn(cfg: TrustedConfig) -> Result<GatewayHandle, TrustedError> {
        let mut ctx = TrustedContext::init(cfg)?;
        let (tx, mut rx) = mpsc::unbounded_channel::<Request>();
        std::thread::Builder::new()
            .name("trusted-core".into())
            .spawn(move || {
                while let Some(req) = rx.blocking_recv() {
                    match req {
                        Request::Provision { id, wrapped, reply } => {
                            let _ = reply.send(ctx.provision(&id, &wrapped));
                        }
                        Request::Reencrypt {
                            origin,
                            dest,
                            env,
                            reply,
                        } => {
                            let _ = reply.send(ctx.reencrypt(&origin, &dest, &env));
                        }
                        Request::Stats { reply } => {
                            let _ = reply.send(ctx.stats());
                        }
                        Request::PublicKeyPem { reply } => {
                            let _ = reply.send(ctx.public_key_pem());
                        }
                        Request::Preload { keys, reply } => {
                            let _ = reply.send(ctx.preload(keys));
                        }
                        Request::ProbeKey { id, reply } => {
                            let _ = reply.send(ctx.probe_key(&id));
                        }
                        Request::Flush { reply } => {
                            let _ = reply.send(ctx.flush());
                        }
                    }
                }
            })
            .map_err(|e| TrustedError::StoreIo(e.to_string()))?;
        Ok(GatewayHandle { tx })
    }
}

impl GatewayHandle {
    async fn call<T>(
        &self,
        make: impl FnOnce(oneshot::Sender<Result<T, TrustedError>>) -> Request,
    ) -> Result<T, TrustedError> {
        let (reply_tx, reply_rx) = oneshot::channel();
        self.tx
            .send(make(reply_tx))
            .map_err(|_| TrustedError::Gone)?;
        reply_rx.await.map_err(|_| TrustedError::Gone)?
    }

    pub async fn provision(
        &self,
        id: ClientId,
        wrapped: WrappedKey,
    ) -> Result<EncryptedEnvelope, TrustedError> {
        self.call(|reply| Request::Provision { id, wrapped, reply })
            .await
    }

    pub async fn reencrypt(
        &self,
        origin: ClientId,
        dest: ClientId,
        env: EncryptedEnvelope,
    ) -> Result<(EncryptedEnvelope, ReencryptTiming), TrustedError> {
        self.call(|reply| Request::Reencrypt {
            origin,
            dest,
            env,
            reply,
        })
        .await
    }

    pub async fn stats(&self) -> Result<TrustedStats, TrustedError> {
        let (reply_tx, reply_rx) = oneshot::channel();
        self.tx
            .send(Request::Stats { reply: reply_tx })
            .map_err(|_| TrustedError::Gone)?;
        reply_rx.await.map_err(|_| TrustedError::Gone)
    }

    pub async fn public_key_pem(&self) -> Result<String, TrustedError> {
        self.call(|reply| Request::PublicKeyPem { reply }).await
    }

    /// Seal keys straight into the store for cache experiments.
    pub async fn preload(&self, keys: Vec<(ClientId, SymmetricKey)>) -> Result<(), TrustedError> {
        self.call(|reply| Request::Preload { keys, reply }).await
    }

    /// Timed two-tier key lookup; only latency and hit/miss come back.
    pub async fn probe_key(&self, id: ClientId) -> Result<KeyProbe, TrustedError> {
        self.call(|reply| Request::ProbeKey { id, reply }).await
    }

    pub async fn flush(&self) -> Result<(), TrustedError> {
        self.call(|reply| Request::Flush { reply }).await
    }
}
