//! Hardened topic-based publish/subscribe broker.
//!
//! The untrusted broker engine forwards only ciphertext. Client keys are
//! provisioned over a two-step handshake (TLS broker authentication,
//! then a public-key-wrapped symmetric key with an encrypted ACK) and
//! live inside a serialized trusted core that re-encrypts every payload
//! from the publisher's key to each subscriber's key. The trusted core
//! keeps hot keys in an LRU cache and evicts to sealed persistent
//! storage keyed from a device seed.
//!
//! Crate layout:
//!
//! - [`protocol`] — binary wire format and framing
//! - [`crypto`] — payload encryption, key wrapping, key derivation
//! - [`trusted`] — the trusted core and its serializing gateway
//! - [`broker`] — TLS sessions, ACLs, subscriptions, fan-out
//! - [`client`] — publisher/subscriber library
//! - [`bench`] — measurement harness and workload generators

pub mod broker;
pub mod client;
pub mod crypto;
pub mod events;
pub mod protocol;
pub mod tls;
pub mod trusted;

pub mod bench;
