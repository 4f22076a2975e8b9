//! Sealed persistent storage for client keys: one AES-256-GCM record
//! per client, authenticated with the client id as associated data.
//! Any tampering with a record file fails the unseal.

use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::{SymmetricKey, KEY_LEN};
use crate::protocol::ClientId;

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no sealed record for this id")]
    NotFound,

    #[error("sealed record failed authentication")]
    UnsealFailed,

    #[error("store i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Directory of sealed records, one file per client id, named by the
/// SHA-256 of the id: `<store_dir>/<hex>.sealed`. Record layout is
/// 12-byte nonce ‖ ciphertext ‖ 16-byte tag.
pub struct SecureStore {
    dir: PathBuf,
    cipher: Aes256Gcm,
}

impl SecureStore {
    pub(super) fn open(dir: &Path, storage_key: &SymmetricKey) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let cipher = Aes256Gcm::new_from_slice(storage_key.as_bytes()).expect("32-byte key");
        Ok(SecureStore {
            dir: dir.to_path_buf(),
            cipher,
        })
    }

    fn record_path(&self, id: &ClientId) -> PathBuf {
        let digest = Sha256::digest(id.as_str().as_bytes());
        let mut name = String::with_capacity(64 + 7);
        for b in digest {
            name.push_str(&format!("{b:02x}"));
        }
        name.push_str(".sealed");
        self.dir.join(name)
    }

    pub(super) fn seal(&self, id: &ClientId, key: &SymmetricKey) -> Result<(), StoreError> {
        self.seal_bytes(&self.record_path(id), id.as_str().as_bytes(), key.as_bytes())
    }

    pub(super) fn unseal(&self, id: &ClientId) -> Result<SymmetricKey, StoreError> {
        let mut plain = self.unseal_bytes(&self.record_path(id), id.as_str().as_bytes())?;
        if plain.len() != KEY_LEN {
            plain.zeroize();
            return Err(StoreError::UnsealFailed);
        }
        let mut bytes = [0u8; KEY_LEN];
        bytes.copy_from_slice(&plain);
        plain.zeroize();
        Ok(SymmetricKey::from_bytes(bytes))
    }

    /// Seal an arbitrary blob under its own file name and associated
    /// data; used for the broker key pair.
    pub(super) fn seal_blob(&self, name: &str, ad: &[u8], plain: &[u8]) -> Result<(), StoreError> {
        self.seal_bytes(&self.dir.join(name), ad, plain)
    }

    pub(super) fn unseal_blob(&self, name: &str, ad: &[u8]) -> Result<Vec<u8>, StoreError> {
        self.unseal_bytes(&self.dir.join(name), ad)
    }

    fn seal_bytes(&self, path: &Path, ad: &[u8], plain: &[u8]) -> Result<(), StoreError> {
        let mut nonce = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plain, aad: ad })
            .expect("gcm encryption of an in-memory buffer");
        let mut record = Vec::with_capacity(NONCE_LEN + sealed.len());
        record.extend_from_slice(&nonce);
        record.extend_from_slice(&sealed);

        // Write-then-rename so a crash mid-write never clobbers the
        // previous record.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &record)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn unseal_bytes(&self, path: &Path, ad: &[u8]) -> Result<Vec<u8>, StoreError> {
        let record = match std::fs::read(path) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound)
            }
            Err(e) => return Err(StoreError::Io(e)),
        };
        if record.len() < NONCE_LEN + TAG_LEN {
            return Err(StoreError::UnsealFailed);
        }
        let (nonce, sealed) = record.split_at(NONCE_LEN);
        self.cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: ad })
            .map_err(|_| StoreError::UnsealFailed)
    }

    #[cfg(any(test, feature = "test-util"))]
    pub fn record_path_for_tests(&self, id: &ClientId) -> PathBuf {
        self.record_path(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn store(dir: &Path) -> SecureStore {
        let key = SymmetricKey::from_bytes([0x42; 32]);
        SecureStore::open(dir, &key).unwrap()
    }

    #[test]
    fn seal_unseal_round_trip() {
        let dir = tempdir();
        let store = store(&dir);
        let id = ClientId::new("alice").unwrap();
        let key = SymmetricKey::generate();
        store.seal(&id, &key).unwrap();
        assert_eq!(store.unseal(&id).unwrap(), key);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_record_is_not_found() {
        let dir = tempdir();
        let store = store(&dir);
        let id = ClientId::new("ghost").unwrap();
        assert!(matches!(store.unseal(&id), Err(StoreError::NotFound)));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn any_single_byte_flip_is_detected() {
        let dir = tempdir();
        let store = store(&dir);
        let id = ClientId::new("alice").unwrap();
        store.seal(&id, &SymmetricKey::generate()).unwrap();
        let path = store.record_path(&id);
        let original = std::fs::read(&path).unwrap();

        let mut rng = rand::thread_rng();
        for _ in 0..50 {
            let mut tampered = original.clone();
            let pos = rng.gen_range(0..tampered.len());
            tampered[pos] ^= 1 << rng.gen_range(0..8);
            std::fs::write(&path, &tampered).unwrap();
            assert!(matches!(store.unseal(&id), Err(StoreError::UnsealFailed)));
        }
        std::fs::write(&path, &original).unwrap();
        assert!(store.unseal(&id).is_ok());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn record_is_bound_to_its_id() {
        let dir = tempdir();
        let store = store(&dir);
        let a = ClientId::new("a").unwrap();
        let b = ClientId::new("b").unwrap();
        store.seal(&a, &SymmetricKey::generate()).unwrap();
        // Rename a's record over b's slot: associated data no longer matches.
        std::fs::rename(store.record_path(&a), store.record_path(&b)).unwrap();
        assert!(matches!(store.unseal(&b), Err(StoreError::UnsealFailed)));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn record_layout_is_pinned() {
        let dir = tempdir();
        let store = store(&dir);
        let id = ClientId::new("layout-check").unwrap();
        store.seal(&id, &SymmetricKey::generate()).unwrap();

        // File name: hex SHA-256 of the client id, `.sealed` suffix.
        let path = store.record_path(&id);
        let name = path.file_name().unwrap().to_str().unwrap();
        let digest = Sha256::digest(b"layout-check");
        let mut expected = String::new();
        for b in digest {
            expected.push_str(&format!("{b:02x}"));
        }
        expected.push_str(".sealed");
        assert_eq!(name, expected);

        // Record: 12-byte nonce, 32-byte ciphertext, 16-byte tag.
        let record = std::fs::read(&path).unwrap();
        assert_eq!(record.len(), 12 + 32 + 16);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn raw_key_bytes_never_hit_disk() {
        let dir = tempdir();
        let store = store(&dir);
        let id = ClientId::new("alice").unwrap();
        let key = SymmetricKey::from_bytes([0xAB; 32]);
        store.seal(&id, &key).unwrap();
        let record = std::fs::read(store.record_path(&id)).unwrap();
        assert!(!record
            .windows(32)
            .any(|w| w == key.as_bytes().as_slice()));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "mqttz-store-test-{}-{}",
            std::process::id(),
            rand::thread_rng().gen::<u64>()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
