//! Re-encryption micro-benchmark with per-phase breakdown, and the
//! key-cache lookup experiment.
//!
//! The micro-benchmark compares three pipelines for the same
//! re-encryption: in the untrusted engine with keys in its memory
//! (`ree`), through the trusted gateway with both keys cached
//! (`tee-mem`), and through the gateway with a capacity-1 cache and two
//! clients so every key retrieval thrashes out to the sealed store
//! (`tee-store`).

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::rngs::OsRng;
use rand::seq::SliceRandom;
use rand::RngCore;

use crate::crypto::{self, SymmetricKey};
use crate::events::EventLog;
use crate::protocol::ClientId;
use crate::trusted::{TrustedConfig, TrustedGateway};

use super::harness::BenchError;
use super::stats::summarize;

pub const DEFAULT_BLOCK_SIZES: [usize; 5] = [20, 200, 2_048, 4_096, 20_480];
pub const DEFAULT_RUNS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MicroMode {
    Ree,
    TeeMem,
    TeeStore,
}

impl std::str::FromStr for MicroMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ree" => Ok(MicroMode::Ree),
            "tee-mem" => Ok(MicroMode::TeeMem),
            "tee-store" => Ok(MicroMode::TeeStore),
            other => Err(format!("unknown micro mode `{other}` (ree|tee-mem|tee-store)")),
        }
    }
}

impl std::fmt::Display for MicroMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MicroMode::Ree => "ree",
            MicroMode::TeeMem => "tee-mem",
            MicroMode::TeeStore => "tee-store",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    RetrieveDecKey,
    RetrieveEncKey,
    Decrypt,
    Encrypt,
    Total,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::RetrieveDecKey,
        Phase::RetrieveEncKey,
        Phase::Decrypt,
        Phase::Encrypt,
        Phase::Total,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Phase::RetrieveDecKey => "retrieve_dec_key",
            Phase::RetrieveEncKey => "retrieve_enc_key",
            Phase::Decrypt => "decrypt",
            Phase::Encrypt => "encrypt",
            Phase::Total => "total",
        }
    }
}

/// One measurement row; five per re-encryption (four phases plus total).
#[derive(Debug, Clone, Copy)]
pub struct MicroRow {
    pub mode: MicroMode,
    pub block_size: usize,
    pub run: usize,
    pub phase: Phase,
    pub value_us: f64,
}

impl MicroRow {
    pub fn csv(&self) -> String {
        format!(
            "micro-{},{},{},{},{:.3}",
            self.mode,
            self.run,
            self.phase.label(),
            self.block_size,
            self.value_us
        )
    }
}

pub const MICRO_CSV_HEADER: &str = "scenario,run,phase,block_size,value_us";

fn us(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Run `runs` re-encryptions per block size in the given pipeline and
/// record the phase breakdown.
pub async fn run_reencrypt_micro(
    block_sizes: &[usize],
    mode: MicroMode,
    runs: usize,
    scratch: &Path,
) -> Result<Vec<MicroRow>, BenchError> {
    match mode {
        MicroMode::Ree => run_micro_ree(block_sizes, runs),
        MicroMode::TeeMem => run_micro_tee(block_sizes, runs, scratch, 128).await,
        MicroMode::TeeStore => run_micro_tee(block_sizes, runs, scratch, 1).await,
    }
}

fn run_micro_ree(block_sizes: &[usize], runs: usize) -> Result<Vec<MicroRow>, BenchError> {
    let origin = "origin".to_string();
    let dest = "dest".to_string();
    let mut keys: HashMap<String, SymmetricKey> = HashMap::new();
    keys.insert(origin.clone(), SymmetricKey::generate());
    keys.insert(dest.clone(), SymmetricKey::generate());

    let mut rows = Vec::with_capacity(block_sizes.len() * runs * 5);
    for &size in block_sizes {
        let mut plaintext = vec![0u8; size];
        OsRng.fill_bytes(&mut plaintext);
        let env = crypto::encrypt_payload(&keys[&origin], &plaintext);

        for run in 0..runs {
            let t0 = Instant::now();
            let dec_key = keys.get(&origin).expect("origin key present").clone();
            let t1 = Instant::now();
            let enc_key = keys.get(&dest).expect("dest key present").clone();
            let t2 = Instant::now();
            let decrypted = crypto::decrypt_payload(&dec_key, &env)
                .map_err(|e| BenchError::Assertion(format!("ree decrypt failed: {e}")))?;
            let t3 = Instant::now();
            let _out = crypto::encrypt_payload(&enc_key, &decrypted);
            let t4 = Instant::now();

            push_rows(
                &mut rows,
                MicroMode::Ree,
                size,
                run,
                [us(t1 - t0), us(t2 - t1), us(t3 - t2), us(t4 - t3), us(t4 - t0)],
            );
        }
    }
    Ok(rows)
}

async fn run_micro_tee(
    block_sizes: &[usize],
    runs: usize,
    scratch: &Path,
    cache_capacity: usize,
) -> Result<Vec<MicroRow>, BenchError> {
    let store_dir = scratch.join(format!("micro-cap{cache_capacity}"));
    let gateway = TrustedGateway::spawn(TrustedConfig {
        store_dir,
        huk_seed: crate::crypto::HukSeed::from_bytes([0x11; 32]),
        cache_capacity,
        events: EventLog::discard(),
        tap: None,
    })
    .map_err(|e| BenchError::Assertion(format!("gateway spawn failed: {e}")))?;

    let origin = ClientId::new("origin").expect("valid id");
    let dest = ClientId::new("dest").expect("valid id");
    let origin_key = SymmetricKey::generate();
    let dest_key = SymmetricKey::generate();
    gateway
        .preload(vec![
            (origin.clone(), origin_key.clone()),
            (dest.clone(), dest_key.clone()),
        ])
        .await
        .map_err(|e| BenchError::Assertion(format!("preload failed: {e}")))?;

    let mut rows = Vec::with_capacity(block_sizes.len() * runs * 5);
    for &size in block_sizes {
        let mut plaintext = vec![0u8; size];
        OsRng.fill_bytes(&mut plaintext);
        let env = crypto::encrypt_payload(&origin_key, &plaintext);

        // One unrecorded warm-up so both configurations start from their
        // steady state (keys cached for tee-mem, thrashing for tee-store).
        let _ = gateway
            .reencrypt(origin.clone(), dest.clone(), env.clone())
            .await
            .map_err(|e| BenchError::Assertion(format!("warm-up reencrypt failed: {e}")))?;

        for run in 0..runs {
            let (_out, timing) = gateway
                .reencrypt(origin.clone(), dest.clone(), env.clone())
                .await
                .map_err(|e| BenchError::Assertion(format!("reencrypt failed: {e}")))?;
            let mode = if cache_capacity == 1 {
                MicroMode::TeeStore
            } else {
                MicroMode::TeeMem
            };
            push_rows(
                &mut rows,
                mode,
                size,
                run,
                [
                    us(timing.retrieve_dec_key),
                    us(timing.retrieve_enc_key),
                    us(timing.decrypt),
                    us(timing.encrypt),
                    us(timing.total),
                ],
            );
        }
    }
    Ok(rows)
}

fn push_rows(rows: &mut Vec<MicroRow>, mode: MicroMode, size: usize, run: usize, values: [f64; 5]) {
    for (phase, value_us) in Phase::ALL.into_iter().zip(values) {
        rows.push(MicroRow {
            mode,
            block_size: size,
            run,
            phase,
            value_us,
        });
    }
}

/// Mean of one phase at one block size.
pub fn phase_mean(rows: &[MicroRow], mode: MicroMode, size: usize, phase: Phase) -> Option<f64> {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.mode == mode && r.block_size == size && r.phase == phase)
        .map(|r| r.value_us)
        .collect();
    summarize(&values).ok().map(|s| s.mean)
}

/// The four phases must partition the total of each re-encryption.
pub fn check_phase_additivity(rows: &[MicroRow]) -> Result<(), BenchError> {
    let mut by_run: HashMap<(MicroMode, usize, usize), (f64, f64)> = HashMap::new();
    for row in rows {
        let slot = by_run
            .entry((row.mode, row.block_size, row.run))
            .or_insert((0.0, 0.0));
        if row.phase == Phase::Total {
            slot.1 = row.value_us;
        } else {
            slot.0 += row.value_us;
        }
    }
    for ((mode, size, run), (sum, total)) in by_run {
        if total <= 0.0 || (sum - total).abs() > 0.05 * total {
            return Err(BenchError::Assertion(format!(
                "phase sum {sum:.3}us vs total {total:.3}us for {mode} size {size} run {run}"
            )));
        }
    }
    Ok(())
}

/// Fetching the decryption key from sealed storage must cost more than
/// fetching it from cache memory, at every block size.
pub fn check_store_fetch_dominance(
    mem_rows: &[MicroRow],
    store_rows: &[MicroRow],
    block_sizes: &[usize],
) -> Result<(), BenchError> {
    for &size in block_sizes {
        let mem = phase_mean(mem_rows, MicroMode::TeeMem, size, Phase::RetrieveDecKey)
            .ok_or_else(|| BenchError::Assertion(format!("no tee-mem rows for size {size}")))?;
        let store = phase_mean(store_rows, MicroMode::TeeStore, size, Phase::RetrieveDecKey)
            .ok_or_else(|| BenchError::Assertion(format!("no tee-store rows for size {size}")))?;
        if store <= mem {
            return Err(BenchError::Assertion(format!(
                "retrieve_dec_key mean: store {store:.3}us <= mem {mem:.3}us at block size {size}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Cache experiment
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CacheBenchConfig {
    pub total_keys: usize,
    pub capacities: Vec<usize>,
    pub queries: usize,
    pub runs: usize,
}

impl Default for CacheBenchConfig {
    fn default() -> Self {
        CacheBenchConfig {
            total_keys: 128,
            capacities: vec![12, 64, 128],
            queries: 128,
            runs: 100,
        }
    }
}

/// One timed lookup in the query phase.
#[derive(Debug, Clone, Copy)]
pub struct CacheRow {
    pub capacity: usize,
    pub run: usize,
    pub query: usize,
    pub value_us: f64,
    pub hit: bool,
}

impl CacheRow {
    pub fn csv(&self) -> String {
        format!(
            "cache-cap{},{},{},{},{:.3}",
            self.capacity,
            self.run,
            if self.hit { "hit" } else { "miss" },
            self.query,
            self.value_us
        )
    }
}

pub const CACHE_CSV_HEADER: &str = "scenario,run,phase,block_size,value_us";

/// Aggregates per capacity across all runs.
#[derive(Debug, Clone, Copy)]
pub struct CacheCapacitySummary {
    pub capacity: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub queries: u64,
    pub misses_after_warmup: u64,
}

/// Preload `total_keys` sealed keys, fill the cache with a random
/// sample, then time `queries` uniform random lookups; `runs` fresh
/// deployments per capacity.
pub async fn run_cache_bench(
    cfg: &CacheBenchConfig,
    scratch: &Path,
) -> Result<(Vec<CacheRow>, Vec<CacheCapacitySummary>), BenchError> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut rng = rand::thread_rng();

    let ids: Vec<ClientId> = (0..cfg.total_keys)
        .map(|i| ClientId::new(format!("key{i:03}")).expect("valid id"))
        .collect();

    for &capacity in &cfg.capacities {
        let mut latencies = Vec::with_capacity(cfg.runs * cfg.queries);
        let mut misses_after_warmup = 0u64;

        for run in 0..cfg.runs {
            // Fresh store directory and fresh cache per run.
            let store_dir = scratch.join(format!("cache-cap{capacity}-run{run}"));
            let gateway = TrustedGateway::spawn(TrustedConfig {
                store_dir,
                huk_seed: crate::crypto::HukSeed::from_bytes([0x22; 32]),
                cache_capacity: capacity,
                events: EventLog::discard(),
                tap: None,
            })
            .map_err(|e| BenchError::Assertion(format!("gateway spawn failed: {e}")))?;

            let keys: Vec<(ClientId, SymmetricKey)> = ids
                .iter()
                .map(|id| (id.clone(), SymmetricKey::generate()))
                .collect();
            gateway
                .preload(keys)
                .await
                .map_err(|e| BenchError::Assertion(format!("preload failed: {e}")))?;

            // Fill the cache with `capacity` distinct randomly sampled keys.
            let mut sample: Vec<&ClientId> = ids.iter().collect();
            sample.shuffle(&mut rng);
            for id in sample.iter().take(capacity) {
                gateway
                    .probe_key((*id).clone())
                    .await
                    .map_err(|e| BenchError::Assertion(format!("warm-up probe failed: {e}")))?;
            }

            for query in 0..cfg.queries {
                let id = ids[rand::Rng::gen_range(&mut rng, 0..ids.len())].clone();
                let probe = gateway
                    .probe_key(id)
                    .await
                    .map_err(|e| BenchError::Assertion(format!("probe failed: {e}")))?;
                let value_us = us(probe.latency);
                latencies.push(value_us);
                if !probe.hit {
                    misses_after_warmup += 1;
                }
                rows.push(CacheRow {
                    capacity,
                    run,
                    query,
                    value_us,
                    hit: probe.hit,
                });
            }
        }

        let summary = summarize(&latencies)?;
        summaries.push(CacheCapacitySummary {
            capacity,
            mean_us: summary.mean,
            median_us: summary.p50,
            queries: latencies.len() as u64,
            misses_after_warmup,
        });
    }
    Ok((rows, summaries))
}

/// Smaller caches must be strictly slower on average, and a cache as
/// large as the population must not miss after warm-up.
pub fn check_cache_ordering(summaries: &[CacheCapacitySummary]) -> Result<(), BenchError> {
    let mut sorted = summaries.to_vec();
    sorted.sort_by_key(|s| s.capacity);
    for pair in sorted.windows(2) {
        if pair[0].mean_us <= pair[1].mean_us {
            return Err(BenchError::Assertion(format!(
                "mean lookup latency not strictly ordered: capacity {} at {:.3}us vs capacity {} at {:.3}us",
                pair[0].capacity, pair[0].mean_us, pair[1].capacity, pair[1].mean_us
            )));
        }
    }
    Ok(())
}

pub fn check_full_cache_never_misses(
    summaries: &[CacheCapacitySummary],
    total_keys: usize,
) -> Result<(), BenchError> {
    for s in summaries {
        if s.capacity == total_keys && s.misses_after_warmup != 0 {
            return Err(BenchError::Assertion(format!(
                "capacity {} saw {} misses after warm-up",
                s.capacity, s.misses_after_warmup
            )));
        }
    }
    Ok(())
}

/// Uniform random queries against a half-size cache settle at a miss
/// fraction of 1 - capacity/total; assert the broad [0.4, 0.6] band.
pub fn check_half_cache_miss_fraction(
    summaries: &[CacheCapacitySummary],
    total_keys: usize,
) -> Result<(), BenchError> {
    for s in summaries {
        if s.capacity * 2 == total_keys {
            let fraction = s.misses_after_warmup as f64 / s.queries as f64;
            if !(0.4..=0.6).contains(&fraction) {
                return Err(BenchError::Assertion(format!(
                    "capacity {} miss fraction {fraction:.3} outside [0.4, 0.6]",
                    s.capacity
                )));
            }
        }
    }
    Ok(())
}
