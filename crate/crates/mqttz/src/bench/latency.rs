//! Dissemination-delay macro-benchmarks: one publisher and one
//! subscriber across broker modes, and fan-out scaling over growing
//! subscriber counts. Delay is subscriber receive time minus publisher
//! send time on the same host clock.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use tokio::sync::mpsc;

use crate::broker::BrokerMode;
use crate::client::KeySource;
use crate::crypto::SymmetricKey;
use crate::protocol::TopicName;

use super::harness::{bench_client, BenchEnv, BenchError, BrokerSpawn, BrokerUnderTest};
use super::stats::{linear_fit, summarize, LinearFit, Summary};

pub const MACRO_CSV_HEADER: &str = "scenario,msg_seq,delay_us";

#[derive(Debug, Clone)]
pub struct LatencyConfig {
    pub mode: BrokerMode,
    pub messages: usize,
    pub payload_size: usize,
    pub pace: Duration,
    pub broker: BrokerSpawn,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            mode: BrokerMode::Tee,
            messages: 500,
            payload_size: 4096,
            pace: Duration::from_millis(2),
            broker: BrokerSpawn::InProcess,
        }
    }
}

#[derive(Debug)]
pub struct LatencyOutcome {
    pub mode: BrokerMode,
    /// Per-sequence-number delay in microseconds.
    pub delays_us: Vec<f64>,
    pub summary: Summary,
}

fn seq_payload(seq: u64, size: usize) -> Vec<u8> {
    let mut payload = vec![0u8; size.max(8)];
    payload[..8].copy_from_slice(&seq.to_be_bytes());
    payload
}

fn seq_of(payload: &[u8]) -> Option<u64> {
    payload.get(..8).map(|b| {
        u64::from_be_bytes(b.try_into().expect("eight bytes"))
    })
}

/// 1 publisher, 1 subscriber, `messages` sequenced payloads; returns the
/// per-message dissemination delays. Any missing message is an error.
pub async fn run_latency_macro(cfg: &LatencyConfig) -> Result<LatencyOutcome, BenchError> {
    let topic = TopicName::new("bench/stream").expect("valid topic");
    let acl = "user pub\ntopic write bench/stream\nuser sub\ntopic read bench/stream\n";
    let env = BenchEnv::create(&format!("latency-{}", cfg.mode), acl)?;
    let broker = BrokerUnderTest::spawn(&env, &cfg.broker, cfg.mode, 64).await?;
    let addr = broker.addr();

    // The vanilla broker forwards the publisher's envelope unchanged, so
    // the subscriber must share the publisher's key to read it.
    let (pub_key, sub_key) = match cfg.mode {
        BrokerMode::Vanilla => {
            let shared = SymmetricKey::generate();
            (KeySource::Key(shared.clone()), KeySource::Key(shared))
        }
        _ => (KeySource::Fresh, KeySource::Fresh),
    };

    let publisher = bench_client(&env, addr, "pub", pub_key).await?;
    let subscriber = bench_client(&env, addr, "sub", sub_key).await?;
    subscriber.subscribe(&topic).await?;

    let messages = cfg.messages;
    let collector = tokio::spawn({
        let subscriber = subscriber.clone();
        async move {
            let mut received: HashMap<u64, Instant> = HashMap::with_capacity(messages);
            while received.len() < messages {
                let msg = tokio::time::timeout(Duration::from_secs(30), subscriber.next_message())
                    .await
                    .ok()
                    .flatten();
                let Some(msg) = msg else { break };
                if let Some(seq) = seq_of(&msg.plaintext) {
                    received.insert(seq, msg.received_at);
                }
            }
            received
        }
    });

    let mut sent_at = Vec::with_capacity(messages);
    for seq in 0..messages as u64 {
        sent_at.push(Instant::now());
        publisher.publish(&topic, &seq_payload(seq, cfg.payload_size))?;
        tokio::time::sleep(cfg.pace).await;
    }

    let received = collector.await.expect("collector task");
    broker.stop().await;

    let lost = messages as u64 - received.len() as u64;
    if lost > 0 {
        env.cleanup();
        return Err(BenchError::Loss {
            lost,
            sent: messages as u64,
        });
    }

    let mut delays_us = Vec::with_capacity(messages);
    for (seq, sent) in sent_at.iter().enumerate() {
        let recv = received[&(seq as u64)];
        let delay = recv
            .checked_duration_since(*sent)
            .expect("monotonic clock: receive follows send");
        delays_us.push(delay.as_secs_f64() * 1e6);
    }

    env.cleanup();
    let summary = summarize(&delays_us)?;
    Ok(LatencyOutcome {
        mode: cfg.mode,
        delays_us,
        summary,
    })
}

/// Median dissemination delay must grow with the security features:
/// vanilla < ree < tee.
pub fn check_mode_ordering(
    vanilla: &LatencyOutcome,
    ree: &LatencyOutcome,
    tee: &LatencyOutcome,
) -> Result<(), BenchError> {
    if !(vanilla.summary.p50 < ree.summary.p50 && ree.summary.p50 < tee.summary.p50) {
        return Err(BenchError::Assertion(format!(
            "median ordering violated: vanilla {:.1}us, ree {:.1}us, tee {:.1}us",
            vanilla.summary.p50, ree.summary.p50, tee.summary.p50
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Subscriber scaling
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub mode: BrokerMode,
    pub subscriber_counts: Vec<usize>,
    pub publishes_per_count: usize,
    pub payload_size: usize,
    pub broker: BrokerSpawn,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            mode: BrokerMode::Tee,
            subscriber_counts: vec![1, 2, 4, 8, 16],
            publishes_per_count: 100,
            payload_size: 4096,
            broker: BrokerSpawn::InProcess,
        }
    }
}

#[derive(Debug)]
pub struct ScalingPoint {
    pub subscribers: usize,
    /// Median delay to the last-served subscriber, microseconds.
    pub median_last_us: f64,
    /// Trusted re-encryption calls observed for this count's publishes
    /// (in-process tee runs only).
    pub reencrypt_calls: Option<u64>,
    pub publishes: usize,
}

#[derive(Debug)]
pub struct ScalingOutcome {
    pub mode: BrokerMode,
    pub points: Vec<ScalingPoint>,
    pub fit: Option<LinearFit>,
}

/// For each subscriber count: publish sequenced messages one at a time,
/// wait until every subscriber got the message, and record the delay to
/// the last one served.
pub async fn run_subscriber_scaling(cfg: &ScalingConfig) -> Result<ScalingOutcome, BenchError> {
    let topic = TopicName::new("bench/scale").expect("valid topic");
    let mut points = Vec::with_capacity(cfg.subscriber_counts.len());

    for &n_subs in &cfg.subscriber_counts {
        let mut acl = String::from("user pub\ntopic write bench/scale\n");
        for i in 0..n_subs {
            acl.push_str(&format!("user s{i:02}\ntopic read bench/scale\n"));
        }
        let env = BenchEnv::create(&format!("scaling-{}-{n_subs}", cfg.mode), &acl)?;
        let broker = BrokerUnderTest::spawn(&env, &cfg.broker, cfg.mode, 64).await?;
        let addr = broker.addr();

        let publisher = bench_client(&env, addr, "pub", KeySource::Fresh).await?;
        let (arrival_tx, mut arrival_rx) = mpsc::unbounded_channel::<(u64, Instant)>();
        for i in 0..n_subs {
            let sub = bench_client(&env, addr, &format!("s{i:02}"), KeySource::Fresh).await?;
            sub.subscribe(&topic).await?;
            let arrival_tx = arrival_tx.clone();
            tokio::spawn(async move {
                while let Some(msg) = sub.next_message().await {
                    if let Some(seq) = seq_of(&msg.plaintext) {
                        if arrival_tx.send((seq, msg.received_at)).is_err() {
                            break;
                        }
                    }
                }
            });
        }
        drop(arrival_tx);

        let stats_before = match &broker {
            BrokerUnderTest::InProcess(handle) => handle.trusted_stats().await,
            BrokerUnderTest::Child { .. } => None,
        };

        // Completion-paced publishing: the next message goes out only
        // after every subscriber saw the previous one, so queueing never
        // pollutes the per-publish fan-out measurement.
        let mut last_delays_us = Vec::with_capacity(cfg.publishes_per_count);
        for seq in 0..cfg.publishes_per_count as u64 {
            let sent = Instant::now();
            publisher.publish(&topic, &seq_payload(seq, cfg.payload_size))?;
            let mut seen = 0usize;
            let mut last = sent;
            while seen < n_subs {
                let arrival = tokio::time::timeout(Duration::from_secs(30), arrival_rx.recv())
                    .await
                    .ok()
                    .flatten();
                match arrival {
                    Some((got_seq, at)) if got_seq == seq => {
                        seen += 1;
                        if at > last {
                            last = at;
                        }
                    }
                    Some(_) => {} // stale arrival from an earlier sequence
                    None => {
                        broker.stop().await;
                        env.cleanup();
                        return Err(BenchError::Loss {
                            lost: (n_subs - seen) as u64,
                            sent: 1,
                        });
                    }
                }
            }
            last_delays_us.push(
                last.checked_duration_since(sent)
                    .expect("monotonic clock: receive follows send")
                    .as_secs_f64()
                    * 1e6,
            );
        }

        let stats_after = match &broker {
            BrokerUnderTest::InProcess(handle) => handle.trusted_stats().await,
            BrokerUnderTest::Child { .. } => None,
        };
        let reencrypt_calls = match (stats_before, stats_after) {
            (Some(before), Some(after)) => Some(after.reencrypt_calls - before.reencrypt_calls),
            _ => None,
        };

        broker.stop().await;
        env.cleanup();

        points.push(ScalingPoint {
            subscribers: n_subs,
            median_last_us: summarize(&last_delays_us)?.p50,
            reencrypt_calls,
            publishes: cfg.publishes_per_count,
        });
    }

    let fit = linear_fit(
        &points
            .iter()
            .map(|p| (p.subscribers as f64, p.median_last_us))
            .collect::<Vec<_>>(),
    );
    Ok(ScalingOutcome {
        mode: cfg.mode,
        points,
        fit,
    })
}

/// Medians must not decrease as subscribers are added.
pub fn check_monotone_medians(outcome: &ScalingOutcome) -> Result<(), BenchError> {
    for pair in outcome.points.windows(2) {
        if pair[1].median_last_us < pair[0].median_last_us {
            return Err(BenchError::Assertion(format!(
                "median delay decreased from {:.1}us at {} subscribers to {:.1}us at {}",
                pair[0].median_last_us,
                pair[0].subscribers,
                pair[1].median_last_us,
                pair[1].subscribers
            )));
        }
    }
    Ok(())
}

/// The least-squares fit over (count, median) must explain the data.
pub fn check_linearity(outcome: &ScalingOutcome, min_r_squared: f64) -> Result<(), BenchError> {
    let fit = outcome
        .fit
        .as_ref()
        .ok_or_else(|| BenchError::Assertion("no fit produced".into()))?;
    if fit.r_squared < min_r_squared {
        return Err(BenchError::Assertion(format!(
            "linear fit r² {:.4} below {min_r_squared}",
            fit.r_squared
        )));
    }
    Ok(())
}

/// Every publish must cost exactly one trusted re-encryption per
/// subscriber.
pub fn check_reencrypt_counts(outcome: &ScalingOutcome) -> Result<(), BenchError> {
    for p in &outcome.points {
        if let Some(calls) = p.reencrypt_calls {
            let expected = (p.subscribers * p.publishes) as u64;
            if calls != expected {
                return Err(BenchError::Assertion(format!(
                    "{} subscribers x {} publishes should make {expected} trusted calls, saw {calls}",
                    p.subscribers, p.publishes
                )));
            }
        }
    }
    Ok(())
}
