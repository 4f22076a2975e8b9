//! Shared scaffolding for benchmark scenarios: scratch directories with
//! dev TLS material, ACL files and a fixed device seed, plus broker
//! spawning either in-process or as a child process (the latter is what
//! CPU sampling and kill/restart scenarios need).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, BufReader};

use crate::broker::{start_broker, BrokerConfig, BrokerError, BrokerHandle, BrokerMode};
use crate::client::{self, ClientConfig, ClientError, KeySource, Session};
use crate::crypto::HukSeed;
use crate::events::EventLog;
use crate::protocol::ClientId;
use crate::tls::{self, DevTlsFiles, TlsError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Broker(#[from] BrokerError),

    #[error(transparent)]
    Client(#[from] ClientError),

    #[error(transparent)]
    Tls(#[from] TlsError),

    #[error(transparent)]
    Stats(#[from] super::stats::StatsError),

    #[error("message loss: {lost} of {sent} messages missing")]
    Loss { lost: u64, sent: u64 },

    #[error("scenario assertion failed: {0}")]
    Assertion(String),

    #[error("broker child process error: {0}")]
    Child(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scratch deployment: directories, TLS material, ACL file, seed.
pub struct BenchEnv {
    pub root: PathBuf,
    pub tls: DevTlsFiles,
    pub acl_path: PathBuf,
    pub store_dir: PathBuf,
    pub pubkey_path: PathBuf,
    pub seed: HukSeed,
}

impl BenchEnv {
    /// Build a fresh environment under the system temp directory.
    pub fn create(tag: &str, acl_text: &str) -> Result<Self, BenchError> {
        let root = std::env::temp_dir().join(format!(
            "mqttz-bench-{tag}-{}-{}",
            std::process::id(),
            rand::random::<u32>()
        ));
        std::fs::create_dir_all(&root)?;
        let tls = tls::generate_dev_tls(
            &root.join("tls"),
            &["localhost".to_string(), "127.0.0.1".to_string()],
        )?;
        let acl_path = root.join("broker.acl");
        std::fs::write(&acl_path, acl_text)?;
        let store_dir = root.join("store");
        let pubkey_path = root.join("broker-pubkey.pem");
        Ok(BenchEnv {
            root,
            tls,
            acl_path,
            store_dir,
            pubkey_path,
            seed: HukSeed::from_bytes([0x5A; 32]),
        })
    }

    pub fn cleanup(&self) {
        let _ = std::fs::remove_dir_all(&self.root);
    }

    pub fn broker_config(&self, mode: BrokerMode, cache_capacity: usize) -> BrokerConfig {
        BrokerConfig {
            listen: "127.0.0.1:0".parse().expect("static addr"),
            tls: Some((self.tls.cert.clone(), self.tls.key.clone())),
            acl_path: self.acl_path.clone(),
            store_dir: self.store_dir.clone(),
            cache_capacity,
            export_pubkey: Some(self.pubkey_path.clone()),
            mode,
            huk_seed: Some(self.seed.clone()),
            events: EventLog::discard(),
            dispatch_tap: None,
            trusted_tap: None,
        }
    }

    pub fn client_config(&self, addr: SocketAddr, id: &str, key: KeySource) -> ClientConfig {
        ClientConfig {
            broker_addr: addr.to_string(),
            ca_path: Some(self.tls.ca.clone()),
            tls_server_name: None,
            broker_pubkey_path: self.pubkey_path.clone(),
            client_id: ClientId::new(id).expect("bench ids are valid"),
            key,
        }
    }
}

/// How a scenario runs the broker.
#[derive(Debug, Clone)]
pub enum BrokerSpawn {
    InProcess,
    /// Spawn this binary with the environment's flags.
    Child(PathBuf),
}

pub enum BrokerUnderTest {
    InProcess(BrokerHandle),
    Child {
        child: tokio::process::Child,
        addr: SocketAddr,
    },
}

impl BrokerUnderTest {
    pub async fn spawn(
        env: &BenchEnv,
        spawn: &BrokerSpawn,
        mode: BrokerMode,
        cache_capacity: usize,
    ) -> Result<Self, BenchError> {
        match spawn {
            BrokerSpawn::InProcess => {
                let handle = start_broker(env.broker_config(mode, cache_capacity)).await?;
                Ok(BrokerUnderTest::InProcess(handle))
            }
            BrokerSpawn::Child(bin) => spawn_child(env, bin, mode, cache_capacity).await,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        match self {
            BrokerUnderTest::InProcess(handle) => handle.addr(),
            BrokerUnderTest::Child { addr, .. } => *addr,
        }
    }

    /// Child pid for /proc sampling; `None` in-process.
    pub fn pid(&self) -> Option<u32> {
        match self {
            BrokerUnderTest::InProcess(_) => None,
            BrokerUnderTest::Child { child, .. } => child.id(),
        }
    }

    pub async fn stop(self) {
        match self {
            BrokerUnderTest::InProcess(handle) => handle.shutdown().await,
            BrokerUnderTest::Child { mut child, .. } => {
                let _ = child.kill().await;
                let _ = child.wait().await;
            }
        }
    }
}

/// Launch the broker binary and parse its `event=listening` line for
/// the bound address; stderr keeps draining in the background so the
/// child never blocks on a full pipe.
async fn spawn_child(
    env: &BenchEnv,
    bin: &Path,
    mode: BrokerMode,
    cache_capacity: usize,
) -> Result<BrokerUnderTest, BenchError> {
    let seed_hex = env.seed.to_hex();
    let mut child = tokio::process::Command::new(bin)
        .arg("--listen")
        .arg("127.0.0.1:0")
        .arg("--cert")
        .arg(&env.tls.cert)
        .arg("--key")
        .arg(&env.tls.key)
        .arg("--acl")
        .arg(&env.acl_path)
        .arg("--store-dir")
        .arg(&env.store_dir)
        .arg("--cache-capacity")
        .arg(cache_capacity.to_string())
        .arg("--export-pubkey")
        .arg(&env.pubkey_path)
        .arg("--mode")
        .arg(mode.to_string())
        .env("MQTTZ_HUK_SEED", seed_hex)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| BenchError::Child(format!("spawn {}: {e}", bin.display())))?;

    let stderr = child.stderr.take().expect("stderr was piped");
    let mut lines = BufReader::new(stderr).lines();
    let addr = tokio::time::timeout(Duration::from_secs(60), async {
        while let Ok(Some(line)) = lines.next_line().await {
            if let Some(addr) = line
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix("addr="))
            {
                if line.contains("event=listening") {
                    return Some(addr.to_string());
                }
            }
        }
        None
    })
    .await
    .map_err(|_| BenchError::Child("broker did not report a listening address".into()))?
    .ok_or_else(|| BenchError::Child("broker exited before listening".into()))?;

    // Keep draining whatever the broker logs from now on.
    tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });

    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| BenchError::Child(format!("bad listening address `{addr}`: {e}")))?;
    Ok(BrokerUnderTest::Child { child, addr })
}

/// Connect and handshake one client against the broker under test.
pub async fn bench_client(
    env: &BenchEnv,
    addr: SocketAddr,
    id: &str,
    key: KeySource,
) -> Result<Session, BenchError> {
    Ok(client::connect(&env.client_config(addr, id, key)).await?)
}

/// ACL text for the usual bench topology: `publishers` writers on their
/// own topics under `topic_prefix`, one `monitor` reading everything
/// under it.
pub fn fanout_acl(topic_prefix: &str, publishers: usize) -> String {
    let mut acl = String::new();
    for i in 0..publishers {
        acl.push_str(&format!(
            "user p{i:02}\ntopic write {topic_prefix}/p{i:02}\n"
        ));
    }
    acl.push_str(&format!("user monitor\ntopic read {topic_prefix}/#\n"));
    acl
}
