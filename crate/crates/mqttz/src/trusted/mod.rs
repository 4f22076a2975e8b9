//! Simulated trusted application: key provisioning, payload
//! re-encryption, and the LRU key cache backed by sealed storage.
//! Everything outside this module is untrusted; the only entry point is
//! the serializing [`TrustedGateway`], and no gateway operation ever
//! returns raw key bytes or plaintext.

mod cache;
mod context;
mod gateway;
mod store;

pub use context::{
    KeyProbe, ReencryptTiming, TrustedConfig, TrustedError, TrustedStats, DEFAULT_CACHE_CAPACITY,
};
pub use gateway::{GatewayHandle, TrustedGateway};
pub use store::StoreError;

// TrustedContext stays private to this module; callers go through the
// gateway. Tests reach the key-level operations via `testing` below.

/// Direct access to key-returning internals for tests and fuzz targets.
/// Compiled out of production builds.
#[cfg(any(test, feature = "test-util"))]
pub mod testing {
    use std::path::Path;

    use crate::crypto::{HukSeed, SymmetricKey, WrappedKey};
    use crate::events::EventLog;
    use crate::protocol::{ClientId, EncryptedEnvelope};

    use super::context::{ReencryptTiming, TrustedConfig, TrustedContext, TrustedError, TrustedStats};
    pub use super::store::SecureStore;
    use super::store::StoreError;

    pub struct TestContext(TrustedContext);

    pub fn new_context(
        store_dir: &Path,
        huk_seed: HukSeed,
        cache_capacity: usize,
        events: EventLog,
    ) -> Result<TestContext, TrustedError> {
        TrustedContext::init(TrustedConfig {
            store_dir: store_dir.to_path_buf(),
            huk_seed,
            cache_capacity,
            events,
            tap: None,
        })
        .map(TestContext)
    }

    impl TestContext {
        pub fn cache_get(&mut self, id: &ClientId) -> Result<SymmetricKey, TrustedError> {
            self.0.cache_get(id)
        }

        pub fn cache_put(&mut self, id: ClientId, key: SymmetricKey) -> Result<(), TrustedError> {
            self.0.cache_put(id, key)
        }

        pub fn provision(
            &mut self,
            id: &ClientId,
            wrapped: &WrappedKey,
        ) -> Result<EncryptedEnvelope, TrustedError> {
            self.0.provision(id, wrapped)
        }

        pub fn reencrypt(
            &mut self,
            origin: &ClientId,
            dest: &ClientId,
            env: &EncryptedEnvelope,
        ) -> Result<(EncryptedEnvelope, ReencryptTiming), TrustedError> {
            self.0.reencrypt(origin, dest, env)
        }

        pub fn stats(&self) -> TrustedStats {
            self.0.stats()
        }

        pub fn public_key_pem(&mut self) -> Result<String, TrustedError> {
            self.0.public_key_pem()
        }

        pub fn seal_direct(&self, id: &ClientId, key: &SymmetricKey) -> Result<(), StoreError> {
            self.0.store().seal(id, key)
        }

        pub fn unseal_direct(&self, id: &ClientId) -> Result<SymmetricKey, StoreError> {
            self.0.store().unseal(id)
        }

        pub fn record_path(&self, id: &ClientId) -> std::path::PathBuf {
            self.0.store().record_path_for_tests(id)
        }
    }

    /// Open a bare store for sealing/unsealing tests without a context.
    pub fn open_store(dir: &Path, storage_key: &SymmetricKey) -> Result<SecureStore, StoreError> {
        SecureStore::open(dir, storage_key)
    }

    pub fn store_seal(
        store: &SecureStore,
        id: &ClientId,
        key: &SymmetricKey,
    ) -> Result<(), StoreError> {
        store.seal(id, key)
    }

    pub fn store_unseal(store: &SecureStore, id: &ClientId) -> Result<SymmetricKey, StoreError> {
        store.unseal(id)
    }

    pub fn store_record_path(store: &SecureStore, id: &ClientId) -> std::path::PathBuf {
        store.record_path_for_tests(id)
    }

    /// Raw record parse/authenticate path used by the fuzz target.
    pub fn store_unseal_blob(
        store: &SecureStore,
        name: &str,
        ad: &[u8],
    ) -> Result<Vec<u8>, StoreError> {
        store.unseal_blob(name, ad)
    }
}
