//! The trusted application state: broker key pair, LRU key cache and
//! sealed store. Key material never leaves this module; the only values
//! its public surface returns are encrypted envelopes and counters.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::{self, BrokerKeyPair, CryptoError, HukSeed, SymmetricKey, WrappedKey};
use crate::events::EventLog;
use crate::protocol::{ClientId, EncryptedEnvelope, ACK_PREFIX};

use super::cache::LruKeyCache;
use super::store::{SecureStore, StoreError};

const KEYPAIR_FILE: &str = "broker_keypair.sealed";
const KEYPAIR_AD: &[u8] = b"mqttz-broker-keypair";

/// Default cache capacity: half of the expected 128-client population.
pub const DEFAULT_CACHE_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum TrustedError {
    #[error("no key provisioned for client {0}")]
    NoKey(ClientId),

    #[error("sealed record for client {0} failed authentication")]
    UnsealFailed(ClientId),

    #[error("envelope does not decrypt under the origin key")]
    BadPadding,

    #[error("wrapped key cannot be unwrapped")]
    UnwrapFailed,

    #[error("secure store i/o failure: {0}")]
    StoreIo(String),

    #[error("crypto failure: {0}")]
    Crypto(String),

    #[error("trusted core is shut down")]
    Gone,
}

impl From<StoreError> for TrustedError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(io) => TrustedError::StoreIo(io.to_string()),
            other => TrustedError::StoreIo(other.to_string()),
        }
    }
}

/// Configuration for bringing up the trusted core.
pub struct TrustedConfig {
    pub store_dir: PathBuf,
    pub huk_seed: HukSeed,
    pub cache_capacity: usize,
    pub events: EventLog,
    /// Isolation-audit tap recording the plaintext buffers this core
    /// handles; `None` outside instrumented tests.
    pub tap: Option<crate::events::BufferTap>,
}

/// Per-call phase timings of one re-encryption, microsecond-resolution.
#[derive(Debug, Clone, Copy)]
pub struct ReencryptTiming {
    pub retrieve_dec_key: Duration,
    pub retrieve_enc_key: Duration,
    pub decrypt: Duration,
    pub encrypt: Duration,
    /// Wall time across the four phases above.
    pub total: Duration,
}

/// Counter snapshot; read-only view of the core's activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustedStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub size: usize,
    pub reencrypt_calls: u64,
}

/// Outcome of a timed key lookup: how long it took and whether it was
/// served from memory.
#[derive(Debug, Clone, Copy)]
pub struct KeyProbe {
    pub latency: Duration,
    pub hit: bool,
}

pub struct TrustedContext {
    keypair: Option<BrokerKeyPair>,
    cache: LruKeyCache,
    store: SecureStore,
    events: EventLog,
    tap: Option<crate::events::BufferTap>,
    reencrypt_calls: u64,
}

impl TrustedContext {
    pub(super) fn init(cfg: TrustedConfig) -> Result<Self, TrustedError> {
        let storage_key = crypto::derive_storage_key(&cfg.huk_seed);
        let store = SecureStore::open(&cfg.store_dir, &storage_key)?;
        Ok(TrustedContext {
            keypair: None,
            cache: LruKeyCache::new(cfg.cache_capacity),
            store,
            events: cfg.events,
            tap: cfg.tap,
            reencrypt_calls: 0,
        })
    }

    /// Unseal the broker key pair, generating and sealing a fresh one on
    /// first start. Key generation is deferred to first use so contexts
    /// that never provision (pure cache workloads) skip it.
    fn ensure_keypair(&mut self) -> Result<&BrokerKeyPair, TrustedError> {
        if self.keypair.is_none() {
            let kp = match self.store.unseal_blob(KEYPAIR_FILE, KEYPAIR_AD) {
                Ok(mut der) => {
                    let kp = BrokerKeyPair::from_pkcs8_der(&der)
                        .map_err(|e| TrustedError::Crypto(e.to_string()))?;
                    der.zeroize();
                    kp
                }
                Err(StoreError::NotFound) => {
                    let kp = BrokerKeyPair::generate()
                        .map_err(|e| TrustedError::Crypto(e.to_string()))?;
                    let mut der = kp
                        .to_pkcs8_der()
                        .map_err(|e| TrustedError::Crypto(e.to_string()))?;
                    self.store.seal_blob(KEYPAIR_FILE, KEYPAIR_AD, &der)?;
                    der.zeroize();
                    kp
                }
                // A sealed key pair that fails authentication means the
                // seed changed or the store was tampered with; refuse to
                // serve rather than silently mint a new identity.
                Err(e) => return Err(e.into()),
            };
            self.keypair = Some(kp);
        }
        Ok(self.keypair.as_ref().expect("keypair was just set"))
    }

    pub(super) fn public_key_pem(&mut self) -> Result<String, TrustedError> {
        Ok(self.ensure_keypair()?.public_key_pem())
    }

    /// Unwrap and store a client key, then reply with an ACK encrypted
    /// under that key so the client can confirm the trusted side holds it.
    pub(super) fn provision(
        &mut self,
        id: &ClientId,
        wrapped: &WrappedKey,
    ) -> Result<EncryptedEnvelope, TrustedError> {
        let keypair = self.ensure_keypair()?;
        let key = crypto::unwrap_client_key(keypair.private_key(), wrapped)
            .map_err(|_| TrustedError::UnwrapFailed)?;
        self.cache_put(id.clone(), key.clone())?;
        let mut ack = format!("{ACK_PREFIX}{id}").into_bytes();
        let env = crypto::encrypt_payload(&key, &ack);
        ack.zeroize();
        Ok(env)
    }

    /// Decrypt under the origin key, re-encrypt under the destination
    /// key with a fresh IV, and wipe the intermediate plaintext. The
    /// timestamp chain makes the four phases partition the total exactly.
    pub(super) fn reencrypt(
        &mut self,
        origin: &ClientId,
        dest: &ClientId,
        env: &EncryptedEnvelope,
    ) -> Result<(EncryptedEnvelope, ReencryptTiming), TrustedError> {
        self.reencrypt_calls += 1;

        let t0 = Instant::now();
        let dec_key = self.cache_get(origin).map_err(absent_as_no_key)?;
        let t1 = Instant::now();
        let enc_key = self.cache_get(dest).map_err(absent_as_no_key)?;
        let t2 = Instant::now();
        let mut plaintext = match crypto::decrypt_payload(&dec_key, env) {
            Ok(p) => p,
            Err(CryptoError::BadPadding) => return Err(TrustedError::BadPadding),
            Err(e) => return Err(TrustedError::Crypto(e.to_string())),
        };
        if let Some(tap) = &self.tap {
            tap.record(&plaintext);
        }
        let t3 = Instant::now();
        let out = crypto::encrypt_payload(&enc_key, &plaintext);
        let t4 = Instant::now();

        plaintext.zeroize();
        let timing = ReencryptTiming {
            retrieve_dec_key: t1 - t0,
            retrieve_enc_key: t2 - t1,
            decrypt: t3 - t2,
            encrypt: t4 - t3,
            total: t4 - t0,
        };
        Ok((out, timing))
    }

    /// Seal keys straight into the store, bypassing both the handshake
    /// and the cache; workload setup for cache experiments. Key material
    /// flows inward only.
    pub(super) fn preload(&mut self, keys: Vec<(ClientId, SymmetricKey)>) -> Result<(), TrustedError> {
        for (id, key) in keys {
            self.store.seal(&id, &key)?;
        }
        Ok(())
    }

    /// Timed key lookup through the regular two-tier path. Only the
    /// latency and hit/miss outcome leave the trusted side.
    pub(super) fn probe_key(&mut self, id: &ClientId) -> Result<KeyProbe, TrustedError> {
        let misses_before = self.cache.counters().1;
        let start = Instant::now();
        let _key = self.cache_get(id)?;
        let latency = start.elapsed();
        Ok(KeyProbe {
            latency,
            hit: self.cache.counters().1 == misses_before,
        })
    }

    /// Two-tier lookup: cache first, then the sealed store. A store hit
    /// is inserted back through the put path. A corrupt record raises an
    /// integrity alarm and reports `UnsealFailed`.
    pub(super) fn cache_get(&mut self, id: &ClientId) -> Result<SymmetricKey, TrustedError> {
        if let Some(key) = self.cache.get(id) {
            return Ok(key);
        }
        let key = match self.store.unseal(id) {
            Ok(k) => k,
            Err(StoreError::NotFound) => return Err(TrustedError::NoKey(id.clone())),
            Err(StoreError::UnsealFailed) => {
                self.events
                    .emit("unseal_alarm", &[("client", id.as_str())]);
                return Err(TrustedError::UnsealFailed(id.clone()));
            }
            Err(e) => return Err(e.into()),
        };
        self.cache_put(id.clone(), key.clone())?;
        Ok(key)
    }

    /// Insert a key as most-recent. The new entry is sealed to the store
    /// before any memory changes (write-through), so a failure leaves
    /// both tiers exactly as they were; the eviction victim is flushed
    /// write-back.
    pub(super) fn cache_put(&mut self, id: ClientId, key: SymmetricKey) -> Result<(), TrustedError> {
        self.store.seal(&id, &key)?;
        if let Some((victim, victim_key)) = self.cache.insert(id, key) {
            // Every cached entry was written through when it was put, so
            // this flush refreshes an already-durable record; a failure
            // is alarming but loses nothing.
            if let Err(e) = self.store.seal(&victim, &victim_key) {
                self.events.emit(
                    "writeback_failed",
                    &[("client", victim.as_str()), ("error", &e.to_string())],
                );
            }
        }
        Ok(())
    }

    pub(super) fn stats(&self) -> TrustedStats {
        let (hits, misses, evictions) = self.cache.counters();
        TrustedStats {
            hits,
            misses,
            evictions,
            size: self.cache.len(),
            reencrypt_calls: self.reencrypt_calls,
        }
    }

    /// Seal every cached entry; used on shutdown.
    pub(super) fn flush(&mut self) -> Result<(), TrustedError> {
        let entries: Vec<(ClientId, SymmetricKey)> = self
            .cache
            .entries()
            .map(|(id, key)| (id.clone(), key.clone()))
            .collect();
        for (id, key) in entries {
            self.store.seal(&id, &key)?;
        }
        Ok(())
    }

    #[cfg(any(test, feature = "test-util"))]
    pub(super) fn store(&self) -> &SecureStore {
        &self.store
    }
}

/// A record that fails authentication is treated as absent by the
/// re-encryption path (the alarm has already been logged).
fn absent_as_no_key(e: TrustedError) -> TrustedError {
    match e {
        TrustedError::UnsealFailed(id) => TrustedError::NoKey(id),
        other => other,
    }
}
