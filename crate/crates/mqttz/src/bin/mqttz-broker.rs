use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mqttz::broker::{run_broker, BrokerConfig, BrokerMode};
use mqttz::events::EventLog;
use mqttz::trusted::DEFAULT_CACHE_CAPACITY;

/// Ciphertext-only publish/subscribe broker. Requires the device seed
/// in MQTTZ_HUK_SEED (64 hex chars); refuses to start without it.
#[derive(Parser)]
#[command(name = "mqttz-broker", version)]
struct Args {
    /// Address to listen on, e.g. 0.0.0.0:8883 (port 0 picks a free one).
    #[arg(long)]
    listen: SocketAddr,

    /// TLS certificate chain (PEM). Optional only in vanilla mode.
    #[arg(long)]
    cert: Option<PathBuf>,

    /// TLS private key (PEM). Optional only in vanilla mode.
    #[arg(long)]
    key: Option<PathBuf>,

    /// Access control list file.
    #[arg(long)]
    acl: PathBuf,

    /// Directory for sealed key records.
    #[arg(long)]
    store_dir: PathBuf,

    /// In-memory key cache capacity (entries).
    #[arg(long, default_value_t = DEFAULT_CACHE_CAPACITY)]
    cache_capacity: usize,

    /// Write the broker public key PEM here on startup.
    #[arg(long)]
    export_pubkey: Option<PathBuf>,

    /// Re-encryption pipeline: tee (default), ree, or vanilla
    /// (benchmark baselines).
    #[arg(long, default_value = "tee")]
    mode: BrokerMode,

    /// Append the event log to this file instead of stderr.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();

    let events = match &args.log_file {
        Some(path) => match EventLog::file(path) {
            Ok(log) => log,
            Err(e) => {
                eprintln!("cannot open log file {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        },
        None => EventLog::stderr(),
    };

    let tls = match (args.cert, args.key) {
        (Some(cert), Some(key)) => Some((cert, key)),
        (None, None) => None,
        _ => {
            eprintln!("--cert and --key must be given together");
            return ExitCode::FAILURE;
        }
    };

    let config = BrokerConfig {
        listen: args.listen,
        tls,
        acl_path: args.acl,
        store_dir: args.store_dir,
        cache_capacity: args.cache_capacity,
        export_pubkey: args.export_pubkey,
        mode: args.mode,
        huk_seed: None, // read from MQTTZ_HUK_SEED
        events,
        dispatch_tap: None,
        trusted_tap: None,
    };

    match run_broker(config).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("broker failed to start: {e}");
            ExitCode::FAILURE
        }
    }
}
