//! Hospital-floor workload: a fleet of rate-capped telemetry publishers
//! streaming to one monitoring subscriber, with per-second throughput
//! accounting, loss tracking by sequence number, and broker CPU
//! sampling when the broker runs as a child process.

use std::time::{Duration, Instant};

use rand::Rng;
use tokio::sync::mpsc;

use crate::broker::BrokerMode;
use crate::client::KeySource;
use crate::protocol::TopicName;

use super::harness::{bench_client, fanout_acl, BenchEnv, BenchError, BrokerSpawn, BrokerUnderTest};
use super::stats::summarize;

pub const WORKLOAD_CSV_HEADER: &str = "second,publisher,bytes";

/// Kernel USER_HZ; Linux has reported 100 for decades and /proc stat
/// fields are defined in these ticks.
const CLOCK_TICKS_PER_SEC: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct MedtechConfig {
    pub mode: BrokerMode,
    pub publishers: usize,
    /// Hard per-publisher budget in wire bytes per second.
    pub per_publisher_cap: u64,
    pub duration: Duration,
    pub topic_prefix: String,
    pub broker: BrokerSpawn,
}

impl Default for MedtechConfig {
    fn default() -> Self {
        MedtechConfig {
            mode: BrokerMode::Tee,
            publishers: 50,
            per_publisher_cap: 350,
            duration: Duration::from_secs(60),
            topic_prefix: "hospital/ecg".to_string(),
            broker: BrokerSpawn::InProcess,
        }
    }
}

/// Duty cycle: each publisher flips this biased coin once a second and
/// emits one fixed-size frame on success. With 50 publishers this
/// targets the 3-5 kB/s aggregate band while staying far under the
/// per-publisher cap.
const EMIT_PROBABILITY: f64 = 0.26;
const PAYLOAD_SIZE: usize = 256;

#[derive(Debug)]
pub struct MedtechOutcome {
    pub seconds: u64,
    /// Wire bytes per publisher per second: `bytes[second][publisher]`.
    pub bytes: Vec<Vec<u64>>,
    pub aggregate_per_second: Vec<u64>,
    pub sent: u64,
    pub lost: u64,
    /// Broker CPU as a fraction of one core, one sample per second
    /// (child-process brokers only).
    pub cpu_samples: Vec<f64>,
}

impl MedtechOutcome {
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (second, pubs) in self.bytes.iter().enumerate() {
            for (publisher, bytes) in pubs.iter().enumerate() {
                rows.push(format!("{second},{publisher},{bytes}"));
            }
        }
        rows
    }

    /// Fig-8-style stacked percentiles of per-publisher outbound rate,
    /// one row per second: (min, p25, p50, p75, max).
    pub fn per_second_percentiles(&self) -> Vec<(u64, f64, f64, f64, f64, f64)> {
        self.bytes
            .iter()
            .enumerate()
            .map(|(second, pubs)| {
                let values: Vec<f64> = pubs.iter().map(|b| *b as f64).collect();
                let s = summarize(&values).expect("publisher set is non-empty");
                (second as u64, s.min, s.p25, s.p50, s.p75, s.max)
            })
            .collect()
    }
}

/// Exact wire size of a publish frame: header, topic string, IV, padded
/// ciphertext.
pub fn publish_wire_len(topic: &TopicName, payload_len: usize) -> u64 {
    let ciphertext = 16 * (payload_len / 16 + 1);
    (5 + 2 + topic.as_str().len() + 16 + ciphertext) as u64
}

pub async fn run_medtech(cfg: &MedtechConfig) -> Result<MedtechOutcome, BenchError> {
    let acl = fanout_acl(&cfg.topic_prefix, cfg.publishers);
    let env = BenchEnv::create("medtech", &acl)?;
    let broker = BrokerUnderTest::spawn(&env, &cfg.broker, cfg.mode, 64).await?;
    let addr = broker.addr();
    let duration_s = cfg.duration.as_secs();

    // One monitor subscribed to every publisher topic.
    let monitor = bench_client(&env, addr, "monitor", KeySource::Fresh).await?;
    let mut topics = Vec::with_capacity(cfg.publishers);
    for i in 0..cfg.publishers {
        let topic = TopicName::new(format!("{}/p{i:02}", cfg.topic_prefix)).expect("valid topic");
        monitor.subscribe(&topic).await?;
        topics.push(topic);
    }

    // Collector: received message counts per publisher, keyed by the
    // publisher index embedded in the payload.
    let (count_tx, mut count_rx) = mpsc::unbounded_channel::<u16>();
    let collector = tokio::spawn({
        let monitor = monitor.clone();
        async move {
            while let Some(msg) = monitor.next_message().await {
                if msg.plaintext.len() >= 10 {
                    let idx = u16::from_be_bytes(
                        msg.plaintext[8..10].try_into().expect("two bytes"),
                    );
                    if count_tx.send(idx).is_err() {
                        break;
                    }
                }
            }
        }
    });

    // CPU sampler over /proc/<pid>/stat for child brokers.
    let cpu_samples = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let cpu_task = broker.pid().map(|pid| {
        let samples = cpu_samples.clone();
        let seconds = duration_s;
        tokio::spawn(async move {
            let mut last = read_proc_ticks(pid);
            let mut interval = tokio::time::interval(Duration::from_secs(1));
            interval.tick().await;
            for _ in 0..seconds {
                interval.tick().await;
                let now = read_proc_ticks(pid);
                if let (Some(prev), Some(cur)) = (last, now) {
                    samples
                        .lock()
                        .expect("cpu sample lock")
                        .push((cur - prev) as f64 / CLOCK_TICKS_PER_SEC);
                }
                last = now;
            }
        })
    });

    let epoch = Instant::now();
    let mut tasks = Vec::with_capacity(cfg.publishers);
    for (i, topic) in topics.iter().enumerate() {
        let session = bench_client(&env, addr, &format!("p{i:02}"), KeySource::Fresh).await?;
        let topic = topic.clone();
        // Spread the once-a-second ticks away from bucket boundaries so
        // scheduling jitter cannot smear one emission into the next
        // accounting second.
        let offset = Duration::from_millis(50 + (i as u64 * 16) % 800);
        tasks.push(tokio::spawn(async move {
            let mut rng: rand::rngs::StdRng = rand::SeedableRng::seed_from_u64(0xECC + i as u64);
            tokio::time::sleep(offset).await;
            let mut interval = tokio::time::interval(Duration::from_secs(1));
            // A delayed tick must not burst-fire into the same accounting
            // second as the next one; the budget is per second.
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            let mut emitted: Vec<(u64, u64)> = Vec::new();
            let mut seq = 0u64;
            for _ in 0..duration_s {
                interval.tick().await;
                if epoch.elapsed().as_secs() >= duration_s {
                    break;
                }
                if rng.gen_bool(EMIT_PROBABILITY) {
                    let mut payload = vec![0u8; PAYLOAD_SIZE];
                    payload[..8].copy_from_slice(&seq.to_be_bytes());
                    payload[8..10].copy_from_slice(&(i as u16).to_be_bytes());
                    seq += 1;
                    let second = epoch.elapsed().as_secs();
                    if session.publish(&topic, &payload).is_ok() {
                        emitted.push((second, publish_wire_len(&topic, PAYLOAD_SIZE)));
                    }
                }
            }
            (i, seq, emitted)
        }));
    }

    // Harvest the publishers, then give in-flight messages a grace
    // period to drain before counting.
    let mut sent_per_pub = vec![0u64; cfg.publishers];
    let mut bytes = vec![vec![0u64; cfg.publishers]; duration_s as usize];
    for task in tasks {
        let (i, sent, emitted) = task.await.expect("publisher task");
        sent_per_pub[i] = sent;
        for (second, wire) in emitted {
            if (second as usize) < bytes.len() {
                bytes[second as usize][i] += wire;
            }
        }
    }

    if let Some(task) = cpu_task {
        let _ = task.await;
    }

    let mut received_per_pub = vec![0u64; cfg.publishers];
    let drain_deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let remaining = drain_deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            break;
        }
        match tokio::time::timeout(remaining, count_rx.recv()).await {
            Ok(Some(idx)) => {
                if (idx as usize) < cfg.publishers {
                    received_per_pub[idx as usize] += 1;
                }
                // Fast path out: stop early once everything arrived.
                if received_per_pub.iter().sum::<u64>() == sent_per_pub.iter().sum::<u64>() {
                    break;
                }
            }
            _ => break,
        }
    }

    collector.abort();
    broker.stop().await;
    env.cleanup();

    let sent: u64 = sent_per_pub.iter().sum();
    let received: u64 = received_per_pub.iter().sum();
    let aggregate_per_second = bytes.iter().map(|pubs| pubs.iter().sum()).collect();
    let cpu_samples = std::mem::take(&mut *cpu_samples.lock().expect("cpu sample lock"));

    Ok(MedtechOutcome {
        seconds: duration_s,
        bytes,
        aggregate_per_second,
        sent,
        lost: sent - received,
        cpu_samples,
    })
}

fn read_proc_ticks(pid: u32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // Fields after the parenthesized command name; utime and stime are
    // the 14th and 15th overall.
    let rest = stat.rsplit_once(')')?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

/// No publisher may exceed its wire-byte budget in any accounting second.
pub fn check_rate_cap(outcome: &MedtechOutcome, cap: u64) -> Result<(), BenchError> {
    for (second, pubs) in outcome.bytes.iter().enumerate() {
        for (publisher, &b) in pubs.iter().enumerate() {
            if b > cap {
                return Err(BenchError::Assertion(format!(
                    "publisher {publisher} sent {b} bytes in second {second}, cap {cap}"
                )));
            }
        }
    }
    Ok(())
}

/// Aggregate throughput must sit in the 3-5 kB/s band (with 20% slack)
/// for at least 80% of the run.
pub fn check_aggregate_band(outcome: &MedtechOutcome) -> Result<(), BenchError> {
    let (low, high) = (2400u64, 6000u64);
    let in_band = outcome
        .aggregate_per_second
        .iter()
        .filter(|&&b| (low..=high).contains(&b))
        .count();
    let needed = (outcome.aggregate_per_second.len() * 4).div_ceil(5);
    if in_band < needed {
        return Err(BenchError::Assertion(format!(
            "aggregate in [{low},{high}] B/s for only {in_band}/{} seconds (need {needed})",
            outcome.aggregate_per_second.len()
        )));
    }
    Ok(())
}

pub fn check_zero_loss(outcome: &MedtechOutcome) -> Result<(), BenchError> {
    if outcome.lost != 0 {
        return Err(BenchError::Loss {
            lost: outcome.lost,
            sent: outcome.sent,
        });
    }
    Ok(())
}

/// Human-readable run report.
pub fn report(outcome: &MedtechOutcome) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let agg: Vec<f64> = outcome
        .aggregate_per_second
        .iter()
        .map(|b| *b as f64)
        .collect();
    if let Ok(s) = summarize(&agg) {
        let _ = writeln!(
            out,
            "aggregate throughput B/s: min {:.0} p50 {:.0} mean {:.0} max {:.0}",
            s.min, s.p50, s.mean, s.max
        );
    }
    let _ = writeln!(
        out,
        "messages: sent {} lost {} ({} publishers, {} s)",
        outcome.sent,
        outcome.lost,
        outcome.bytes.first().map(Vec::len).unwrap_or(0),
        outcome.seconds
    );
    if outcome.cpu_samples.is_empty() {
        let _ = writeln!(out, "broker cpu: not sampled (in-process broker)");
    } else if let Ok(s) = summarize(&outcome.cpu_samples) {
        let _ = writeln!(
            out,
            "broker cpu (fraction of one core): mean {:.3} p50 {:.3} max {:.3}",
            s.mean, s.p50, s.max
        );
    }
    out
}
