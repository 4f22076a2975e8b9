//! The two cryptographic layers of the system: AES-256-CBC payload
//! encryption under per-client symmetric keys, and RSA-OAEP wrapping of
//! those keys for handshake provisioning. A deterministic HKDF derives
//! the storage-sealing key from the device seed.
//!
//! Payload envelopes are CBC with a fresh random IV and PKCS#7 padding,
//! and carry no per-message authenticator. [`aead`] offers an
//! authenticated envelope as an opt-in alternative; nothing in the
//! broker pipeline uses it.

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rand::rngs::OsRng;
use rand::RngCore;
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha2::Sha256;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::protocol::{EncryptedEnvelope, IV_LEN, WRAPPED_KEY_LEN};

type CbcEnc = cbc::Encryptor<aes::Aes256>;
type CbcDec = cbc::Decryptor<aes::Aes256>;

pub const KEY_LEN: usize = 32;

const STORAGE_KEY_INFO: &[u8] = b"mqttz-secure-storage-v1";

/// Environment variable carrying the device seed as 64 hex characters.
pub const HUK_SEED_ENV: &str = "MQTTZ_HUK_SEED";

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("bad padding: wrong key or corrupted ciphertext")]
    BadPadding,

    #[error("key unwrap failed")]
    UnwrapFailed,

    #[error("{HUK_SEED_ENV} is not set")]
    MissingSeed,

    #[error("device seed must be exactly 64 hex characters")]
    InvalidSeed,

    #[error("rsa error: {0}")]
    Rsa(#[from] rsa::Error),

    #[error("pkcs8 error: {0}")]
    Pkcs8(String),
}

/// 32-byte per-client AES key. Never serialized in the clear by the
/// trusted side; zeroed on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn generate() -> Self {
        let mut bytes = [0u8; KEY_LEN];
        OsRng.fill_bytes(&mut bytes);
        SymmetricKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// RSA-OAEP ciphertext of a [`SymmetricKey`]; always 256 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedKey(Box<[u8; WRAPPED_KEY_LEN]>);

impl WrappedKey {
    pub fn from_bytes(bytes: Box<[u8; WRAPPED_KEY_LEN]>) -> Self {
        WrappedKey(bytes)
    }

    pub fn into_bytes(self) -> Box<[u8; WRAPPED_KEY_LEN]> {
        self.0
    }

    pub fn as_bytes(&self) -> &[u8; WRAPPED_KEY_LEN] {
        &self.0
    }
}

/// Deployment-supplied 32-byte seed standing in for a hardware unique
/// key. The same seed always derives the same storage key.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct HukSeed([u8; 32]);

impl HukSeed {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        HukSeed(bytes)
    }

    /// Parse 64 hex characters into a seed.
    pub fn from_hex(hex: &str) -> Result<Self, CryptoError> {
        let hex = hex.trim();
        if hex.len() != 64 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(CryptoError::InvalidSeed);
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).expect("hex is ascii");
            bytes[i] = u8::from_str_radix(s, 16).expect("validated hex digit pair");
        }
        Ok(HukSeed(bytes))
    }

    /// Read the seed from [`HUK_SEED_ENV`]; the broker refuses to start
    /// without it.
    pub fn from_env() -> Result<Self, CryptoError> {
        match std::env::var(HUK_SEED_ENV) {
            Ok(v) => HukSeed::from_hex(&v),
            Err(_) => Err(CryptoError::MissingSeed),
        }
    }

    /// Render as the 64-hex-char form the environment variable takes.
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Debug for HukSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HukSeed(..)")
    }
}

/// Derive the storage-sealing key from the device seed.
/// HKDF-SHA-256 with empty salt and a fixed info string, truncated to 32 bytes.
pub fn derive_storage_key(seed: &HukSeed) -> SymmetricKey {
    let hk = hkdf::Hkdf::<Sha256>::new(None, &seed.0);
    let mut out = [0u8; KEY_LEN];
    hk.expand(STORAGE_KEY_INFO, &mut out)
        .expect("32 bytes is a valid hkdf output length");
    SymmetricKey(out)
}

/// Encrypt a payload under a client key: fresh random 16-byte IV,
/// AES-256-CBC, PKCS#7 padding.
pub fn encrypt_payload(key: &SymmetricKey, plaintext: &[u8]) -> EncryptedEnvelope {
    let mut iv = [0u8; IV_LEN];
    OsRng.fill_bytes(&mut iv);
    encrypt_with_iv(key, iv, plaintext)
}

fn encrypt_with_iv(key: &SymmetricKey, iv: [u8; IV_LEN], plaintext: &[u8]) -> EncryptedEnvelope {
    let enc = CbcEnc::new_from_slices(&key.0, &iv).expect("fixed key and iv lengths");
    let ciphertext = enc.encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    EncryptedEnvelope::new(iv, ciphertext).expect("padded ciphertext is a positive multiple of 16")
}

/// Test-vector entry point with a caller-chosen IV. Not compiled into
/// production builds.
#[cfg(any(test, feature = "test-util"))]
pub fn encrypt_payload_with_iv(
    key: &SymmetricKey,
    iv: [u8; IV_LEN],
    plaintext: &[u8],
) -> EncryptedEnvelope {
    encrypt_with_iv(key, iv, plaintext)
}

/// Decrypt an envelope and strip padding. `BadPadding` signals a wrong
/// key or corrupted ciphertext.
pub fn decrypt_payload(key: &SymmetricKey, env: &EncryptedEnvelope) -> Result<Vec<u8>, CryptoError> {
    let dec = CbcDec::new_from_slices(&key.0, &env.iv).expect("fixed key and iv lengths");
    dec.decrypt_padded_vec_mut::<Pkcs7>(&env.ciphertext)
        .map_err(|_| CryptoError::BadPadding)
}

/// Broker key pair. The private half lives only inside the trusted core
/// or sealed at rest.
#[derive(Clone)]
pub struct BrokerKeyPair {
    private: RsaPrivateKey,
    public: RsaPublicKey,
}

impl BrokerKeyPair {
    /// Generate a fresh RSA-2048 pair.
    pub fn generate() -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::new(&mut OsRng, 2048)?;
        let public = private.to_public_key();
        Ok(BrokerKeyPair { private, public })
    }

    pub fn public_key(&self) -> &RsaPublicKey {
        &self.public
    }

    pub fn public_key_pem(&self) -> String {
        self.public
            .to_public_key_pem(LineEnding::LF)
            .expect("rsa public key encodes to pem")
    }

    pub(crate) fn private_key(&self) -> &RsaPrivateKey {
        &self.private
    }

    /// Serialize the private half for sealing. The caller is responsible
    /// for encrypting the result before it touches disk.
    pub(crate) fn to_pkcs8_der(&self) -> Result<Vec<u8>, CryptoError> {
        let doc = self
            .private
            .to_pkcs8_der()
            .map_err(|e| CryptoError::Pkcs8(e.to_string()))?;
        Ok(doc.as_bytes().to_vec())
    }

    pub(crate) fn from_pkcs8_der(der: &[u8]) -> Result<Self, CryptoError> {
        let private =
            RsaPrivateKey::from_pkcs8_der(der).map_err(|e| CryptoError::Pkcs8(e.to_string()))?;
        let public = private.to_public_key();
        Ok(BrokerKeyPair { private, public })
    }
}

impl std::fmt::Debug for BrokerKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BrokerKeyPair(..)")
    }
}

/// Wrap a client key under the broker public key (OAEP-SHA-256).
pub fn wrap_client_key(
    public: &RsaPublicKey,
    key: &SymmetricKey,
) -> Result<WrappedKey, CryptoError> {
    let ct = public.encrypt(&mut OsRng, Oaep::new::<Sha256>(), &key.0)?;
    let bytes: Box<[u8; WRAPPED_KEY_LEN]> = ct
        .into_boxed_slice()
        .try_into()
        .map_err(|_| CryptoError::UnwrapFailed)?;
    Ok(WrappedKey(bytes))
}

/// Unwrap a client key. Callable only from the trusted core.
pub(crate) fn unwrap_client_key(
    private: &RsaPrivateKey,
    wrapped: &WrappedKey,
) -> Result<SymmetricKey, CryptoError> {
    let mut pt = private
        .decrypt(Oaep::new::<Sha256>(), wrapped.as_bytes())
        .map_err(|_| CryptoError::UnwrapFailed)?;
    if pt.len() != KEY_LEN {
        pt.zeroize();
        return Err(CryptoError::UnwrapFailed);
    }
    let mut bytes = [0u8; KEY_LEN];
    bytes.copy_from_slice(&pt);
    pt.zeroize();
    Ok(SymmetricKey(bytes))
}

#[cfg(any(test, feature = "test-util"))]
pub fn unwrap_client_key_for_tests(
    keypair: &BrokerKeyPair,
    wrapped: &WrappedKey,
) -> Result<SymmetricKey, CryptoError> {
    unwrap_client_key(&keypair.private, wrapped)
}

/// Authenticated envelope variant (AES-256-GCM). Provided as an opt-in
/// extension for deployments that want payload integrity at this layer;
/// the broker pipeline does not use it.
pub mod aead {
    use aes_gcm::aead::{Aead, KeyInit, Payload};
    use aes_gcm::{Aes256Gcm, Nonce};
    use rand::rngs::OsRng;
    use rand::RngCore;

    use super::{CryptoError, SymmetricKey};

    pub const NONCE_LEN: usize = 12;

    /// Returns nonce ‖ ciphertext ‖ tag.
    pub fn seal(key: &SymmetricKey, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
        let mut nonce = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
            .expect("gcm encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(key: &SymmetricKey, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < NONCE_LEN + 16 {
            return Err(CryptoError::BadPadding);
        }
        let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
            .map_err(|_| CryptoError::BadPadding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::sync::OnceLock;

    fn test_keypair() -> &'static BrokerKeyPair {
        static PAIR: OnceLock<BrokerKeyPair> = OnceLock::new();
        PAIR.get_or_init(|| BrokerKeyPair::generate().unwrap())
    }

    fn hex(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }

    // NIST SP 800-38A, F.2.5 CBC-AES256.Encrypt.
    #[test]
    fn nist_cbc_aes256_known_answer() {
        let key_bytes: [u8; 32] =
            hex("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
                .try_into()
                .unwrap();
        let iv: [u8; 16] = hex("000102030405060708090a0b0c0d0e0f").try_into().unwrap();
        let plaintext = hex(concat!(
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
            "30c81c46a35ce411e5fbc1191a0a52ef",
            "f69f2445df4f9b17ad2b417be66c3710"
        ));
        let expected = hex(concat!(
            "f58c4c04d6e5f1ba779eabfb5f7bfbd6",
            "9cfc4e967edb808d679f777bc6702c7d",
            "39f23369a9d9bacfa530e26304231461",
            "b2eb05e2c39be9fcda6c19078c6a9d1b"
        ));

        let key = SymmetricKey::from_bytes(key_bytes);
        let env = encrypt_payload_with_iv(&key, iv, &plaintext);
        // The vector covers whole blocks; our envelope appends one PKCS#7
        // padding block after them.
        assert_eq!(env.ciphertext.len(), expected.len() + 16);
        assert_eq!(&env.ciphertext[..expected.len()], &expected[..]);
        assert_eq!(decrypt_payload(&key, &env).unwrap(), plaintext);
    }

    // RFC 5869 test cases 1 and 3 for the underlying HKDF-SHA-256.
    #[test]
    fn rfc5869_hkdf_vectors() {
        let ikm = [0x0bu8; 22];
        let salt = hex("000102030405060708090a0b0c");
        let info = hex("f0f1f2f3f4f5f6f7f8f9");
        let hk = hkdf::Hkdf::<Sha256>::new(Some(&salt), &ikm);
        let mut okm = [0u8; 42];
        hk.expand(&info, &mut okm).unwrap();
        assert_eq!(
            okm.to_vec(),
            hex(concat!(
                "3cb25f25faacd57a90434f64d0362f2a",
                "2d2d0a90cf1a5a4c5db02d56ecc4c5bf",
                "34007208d5b887185865"
            ))
        );

        let hk = hkdf::Hkdf::<Sha256>::new(None, &ikm);
        let mut okm = [0u8; 42];
        hk.expand(&[], &mut okm).unwrap();
        assert_eq!(
            okm.to_vec(),
            hex(concat!(
                "8da4e775a563c18f715f802a063c5a31",
                "b8a11f5c5ee1879ec3454e5f3c738d2d",
                "9d201395faa4b61a96c8"
            ))
        );
    }

    #[test]
    fn empty_plaintext_is_one_padding_block() {
        let key = SymmetricKey::generate();
        let env = encrypt_payload(&key, &[]);
        assert_eq!(env.ciphertext.len(), 16);
        assert_eq!(decrypt_payload(&key, &env).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn four_kib_plaintext_pads_to_4112() {
        let key = SymmetricKey::generate();
        let env = encrypt_payload(&key, &vec![0x5Au8; 4096]);
        assert_eq!(env.ciphertext.len(), 4112);
    }

    #[test]
    fn wrong_key_usually_fails_padding() {
        // PKCS#7 can accept a garbage final block by chance, at a rate of
        // roughly 2^-8 per padding value; over 1000 trials we must see
        // failures at least 98% of the time.
        let mut failures = 0;
        for i in 0..1000 {
            let k1 = SymmetricKey::generate();
            let k2 = SymmetricKey::generate();
            let env = encrypt_payload(&k1, format!("message {i}").as_bytes());
            if decrypt_payload(&k2, &env).is_err() {
                failures += 1;
            }
        }
        assert!(failures >= 980, "only {failures}/1000 decryptions failed");
    }

    #[test]
    fn iv_uniqueness_over_many_encryptions() {
        let key = SymmetricKey::generate();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let env = encrypt_payload(&key, b"x");
            assert!(seen.insert(env.iv), "repeated IV");
        }
    }

    #[test]
    fn wrap_unwrap_inverse() {
        let pair = test_keypair();
        let key = SymmetricKey::generate();
        let wrapped = wrap_client_key(pair.public_key(), &key).unwrap();
        assert_eq!(wrapped.as_bytes().len(), WRAPPED_KEY_LEN);
        let back = unwrap_client_key(pair.private_key(), &wrapped).unwrap();
        assert_eq!(back, key);
    }

    #[test]
    fn unwrap_with_wrong_private_key_fails() {
        let pair_a = test_keypair();
        let pair_b = BrokerKeyPair::generate().unwrap();
        let key = SymmetricKey::generate();
        let wrapped = wrap_client_key(pair_a.public_key(), &key).unwrap();
        assert!(matches!(
            unwrap_client_key(pair_b.private_key(), &wrapped),
            Err(CryptoError::UnwrapFailed)
        ));
    }

    #[test]
    fn wrapped_key_is_always_256_bytes() {
        let pair = test_keypair();
        for _ in 0..100 {
            let key = SymmetricKey::generate();
            let wrapped = wrap_client_key(pair.public_key(), &key).unwrap();
            assert_eq!(wrapped.as_bytes().len(), 256);
        }
    }

    #[test]
    fn storage_key_is_deterministic_and_seed_sensitive() {
        let seed = HukSeed::from_bytes([7u8; 32]);
        assert_eq!(derive_storage_key(&seed), derive_storage_key(&seed));

        let mut rng = rand::thread_rng();
        for _ in 0..100 {
            let mut flipped = [7u8; 32];
            let bit = rand::Rng::gen_range(&mut rng, 0..256);
            flipped[bit / 8] ^= 1 << (bit % 8);
            let other = HukSeed::from_bytes(flipped);
            assert_ne!(derive_storage_key(&seed), derive_storage_key(&other));
        }
    }

    #[test]
    fn seed_hex_parsing() {
        let ok = "00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff";
        assert!(HukSeed::from_hex(ok).is_ok());
        assert!(HukSeed::from_hex(&ok[..62]).is_err());
        assert!(HukSeed::from_hex(&format!("{}zz", &ok[..62])).is_err());
    }

    #[test]
    fn aead_envelope_round_trip_and_tamper() {
        let key = SymmetricKey::generate();
        let sealed = aead::seal(&key, b"ctx", b"hello");
        assert_eq!(aead::open(&key, b"ctx", &sealed).unwrap(), b"hello");
        assert!(aead::open(&key, b"other", &sealed).is_err());
        let mut bad = sealed.clone();
        bad[aead::NONCE_LEN + 1] ^= 0x01;
        assert!(aead::open(&key, b"ctx", &bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_all_lengths(len in 0usize..20_480, byte in any::<u8>()) {
            let key = SymmetricKey::generate();
            let plaintext = vec![byte; len];
            let env = encrypt_payload(&key, &plaintext);
            prop_assert_eq!(env.ciphertext.len(), 16 * (len / 16 + 1));
            prop_assert_eq!(decrypt_payload(&key, &env).unwrap(), plaintext);
        }
    }
}
