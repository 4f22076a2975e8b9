use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use mqttz::client::{connect, ClientConfig, KeySource};
use mqttz::protocol::{ClientId, TopicName};

/// Publisher/subscriber client for the mqttz broker.
#[derive(Parser)]
#[command(name = "mqttz-client", version)]
struct Args {
    /// Broker address as host:port.
    #[arg(long)]
    broker: String,

    /// Root CA file to verify the broker against. Omit to connect over
    /// plain TCP (vanilla-mode brokers only).
    #[arg(long)]
    ca: Option<PathBuf>,

    /// TLS server name when it differs from the host part of --broker.
    #[arg(long)]
    server_name: Option<String>,

    /// Broker public key PEM (as exported by the broker).
    #[arg(long)]
    broker_pubkey: PathBuf,

    /// Client identity.
    #[arg(long)]
    id: String,

    /// Persistent key file; created on first use. Omit for a fresh
    /// random key per invocation.
    #[arg(long)]
    key_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Connect, run the key-provisioning handshake, and exit.
    Handshake,
    /// Publish payloads to a topic.
    Pub {
        topic: String,
        /// Payload file; stdin when omitted.
        #[arg(long)]
        payload_file: Option<PathBuf>,
        /// Messages per second; 0 publishes as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        /// How many times to publish the payload.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Subscribe to a topic and print one line per message.
    Sub {
        topic: String,
        /// Also append raw payload bytes to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit after this many messages (runs forever when omitted).
        #[arg(long)]
        count: Option<u64>,
    },
}

fn unix_micros() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros())
        .unwrap_or(0)
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();

    let client_id = match ClientId::new(args.id.clone()) {
        Ok(id) => id,
        Err(e) => {
            eprintln!("invalid client id: {e}");
            return ExitCode::FAILURE;
        }
    };
    let key = match &args.key_file {
        Some(path) => KeySource::File(path.clone()),
        None => KeySource::Fresh,
    };
    let cfg = ClientConfig {
        broker_addr: args.broker.clone(),
        ca_path: args.ca.clone(),
        tls_server_name: args.server_name.clone(),
        broker_pubkey_path: args.broker_pubkey.clone(),
        client_id,
        key,
    };

    let session = match connect(&cfg).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("connection failed: {e}");
            return ExitCode::FAILURE;
        }
    };

    match args.command {
        Command::Handshake => {
            println!("handshake ok: broker holds the wrapped key for `{}`", args.id);
            ExitCode::SUCCESS
        }
        Command::Pub {
            topic,
            payload_file,
            rate,
            count,
        } => {
            let topic = match TopicName::new(topic) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("invalid topic: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let payload = match payload_file {
                Some(path) => match std::fs::read(&path) {
                    Ok(p) => p,
                    Err(e) => {
                        eprintln!("cannot read {}: {e}", path.display());
                        return ExitCode::FAILURE;
                    }
                },
                None => {
                    let mut buf = Vec::new();
                    if std::io::stdin().read_to_end(&mut buf).is_err() {
                        eprintln!("cannot read payload from stdin");
                        return ExitCode::FAILURE;
                    }
                    buf
                }
            };
            let pace = if rate > 0.0 {
                Some(Duration::from_secs_f64(1.0 / rate))
            } else {
                None
            };
            for i in 0..count {
                if let Err(e) = session.publish(&topic, &payload) {
                    eprintln!("publish {i} failed: {e}");
                    return ExitCode::FAILURE;
                }
                if let Some(pace) = pace {
                    tokio::time::sleep(pace).await;
                }
            }
            // Give the broker a beat to report authorization problems.
            if let Some(code) = session.next_error(Duration::from_millis(200)).await {
                eprintln!("broker reported: {code}");
                return ExitCode::FAILURE;
            }
            println!("published {count} message(s) to {topic}");
            ExitCode::SUCCESS
        }
        Command::Sub { topic, out, count } => {
            let topic = match TopicName::new(topic) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("invalid topic: {e}");
                    return ExitCode::FAILURE;
                }
            };
            if let Err(e) = session.subscribe(&topic).await {
                eprintln!("subscribe failed: {e}");
                return ExitCode::FAILURE;
            }
            let mut out_file = match &out {
                Some(path) => match std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                {
                    Ok(f) => Some(f),
                    Err(e) => {
                        eprintln!("cannot open {}: {e}", path.display());
                        return ExitCode::FAILURE;
                    }
                },
                None => None,
            };
            let mut received = 0u64;
            while count.is_none_or(|c| received < c) {
                let Some(msg) = session.next_message().await else {
                    eprintln!("connection closed by broker");
                    return ExitCode::FAILURE;
                };
                println!(
                    "ts_us={} topic={} bytes={}",
                    unix_micros(),
                    msg.topic,
                    msg.plaintext.len()
                );
                if let Some(f) = &mut out_file {
                    use std::io::Write;
                    let _ = f.write_all(&msg.plaintext);
                }
                received += 1;
            }
            eprintln!(
                "received {received} message(s); {} undecryptable skipped",
                session.bad_padding_count()
            );
            ExitCode::SUCCESS
        }
    }
}
