use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use mqttz::bench::harness::BenchError;
use mqttz::bench::latency::{
    check_linearity, check_mode_ordering, check_monotone_medians, check_reencrypt_counts,
    run_latency_macro, run_subscriber_scaling, LatencyConfig, ScalingConfig, MACRO_CSV_HEADER,
};
use mqttz::bench::medtech::{
    check_aggregate_band, check_rate_cap, check_zero_loss, report, run_medtech, MedtechConfig,
    WORKLOAD_CSV_HEADER,
};
use mqttz::bench::micro::{
    check_cache_ordering, check_full_cache_never_misses, check_half_cache_miss_fraction,
    check_phase_additivity, check_store_fetch_dominance, run_cache_bench, run_reencrypt_micro,
    CacheBenchConfig, MicroMode, CACHE_CSV_HEADER, DEFAULT_BLOCK_SIZES, DEFAULT_RUNS,
    MICRO_CSV_HEADER,
};
use mqttz::bench::stats::write_csv;
use mqttz::bench::BrokerSpawn;
use mqttz::broker::BrokerMode;

/// Benchmark harness. Every scenario carries embedded assertions and
/// the process exits nonzero if any of them fails.
#[derive(Parser)]
#[command(name = "mqttz-bench", version)]
struct Args {
    /// Write scenario CSV here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-encryption phase breakdown across pipelines and block sizes.
    Micro {
        /// Pipeline to measure; omitted runs ree, tee-mem and tee-store.
        #[arg(long)]
        mode: Option<MicroMode>,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
    },
    /// Key-cache lookup latency across cache capacities.
    Cache {
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Dissemination delay, 1 publisher and 1 subscriber.
    Latency {
        /// Broker mode; omitted runs vanilla, ree and tee and checks
        /// their median ordering.
        #[arg(long)]
        mode: Option<BrokerMode>,
        #[arg(long, default_value_t = 500)]
        messages: usize,
    },
    /// Median delay to the last subscriber as fan-out grows.
    Scaling {
        #[arg(long, default_value = "tee")]
        mode: BrokerMode,
        /// Comma-separated subscriber counts.
        #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',')]
        subscribers: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        messages: usize,
    },
    /// Hospital-floor telemetry workload.
    Medtech {
        #[arg(long, default_value = "tee")]
        mode: BrokerMode,
        #[arg(long, default_value_t = 50)]
        publishers: usize,
        /// Run length in seconds.
        #[arg(long, default_value_t = 60)]
        duration: u64,
        /// Broker binary to run as a child process (enables CPU
        /// sampling); defaults to mqttz-broker next to this binary.
        #[arg(long)]
        broker_bin: Option<PathBuf>,
        /// Run the broker inside this process (no CPU sampling).
        #[arg(long, default_value_t = false)]
        in_process: bool,
    },
}

fn sibling_broker_bin() -> Option<PathBuf> {
    let path = std::env::current_exe().ok()?.parent()?.join("mqttz-broker");
    path.exists().then_some(path)
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "mqttz-bench-cli-{tag}-{}-{}",
        std::process::id(),
        rand::random::<u32>()
    ));
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

async fn run(args: Args) -> Result<(), BenchError> {
    match args.command {
        Command::Micro { mode, runs } => {
            let scratch = scratch_dir("micro");
            let modes: Vec<MicroMode> = match mode {
                Some(m) => vec![m],
                None => vec![MicroMode::Ree, MicroMode::TeeMem, MicroMode::TeeStore],
            };
            let mut all_rows = Vec::new();
            for mode in &modes {
                let rows =
                    run_reencrypt_micro(&DEFAULT_BLOCK_SIZES, *mode, runs, &scratch).await?;
                let expected = DEFAULT_BLOCK_SIZES.len() * runs * 5;
                if rows.len() != expected {
                    return Err(BenchError::Assertion(format!(
                        "{mode}: expected {expected} rows, got {}",
                        rows.len()
                    )));
                }
                check_phase_additivity(&rows)?;
                all_rows.extend(rows);
            }
            if modes.contains(&MicroMode::TeeMem) && modes.contains(&MicroMode::TeeStore) {
                check_store_fetch_dominance(&all_rows, &all_rows, &DEFAULT_BLOCK_SIZES)?;
                println!("store-vs-memory key fetch dominance: ok");
            }
            for mode in &modes {
                for &size in &DEFAULT_BLOCK_SIZES {
                    if let Some(mean) = mqttz::bench::micro::phase_mean(
                        &all_rows,
                        *mode,
                        size,
                        mqttz::bench::micro::Phase::Total,
                    ) {
                        println!("{mode} block {size}B: total mean {mean:.1}us");
                    }
                }
            }
            if let Some(out) = &args.out {
                write_csv(out, MICRO_CSV_HEADER, all_rows.iter().map(|r| r.csv()))?;
                println!("wrote {}", out.display());
            }
            let _ = std::fs::remove_dir_all(&scratch);
            Ok(())
        }
        Command::Cache { runs } => {
            let scratch = scratch_dir("cache");
            let cfg = CacheBenchConfig {
                runs,
                ..CacheBenchConfig::default()
            };
            let (rows, summaries) = run_cache_bench(&cfg, &scratch).await?;
            for s in &summaries {
                println!(
                    "capacity {:>3}: mean {:>9.2}us median {:>9.2}us misses-after-warmup {}",
                    s.capacity, s.mean_us, s.median_us, s.misses_after_warmup
                );
            }
            check_cache_ordering(&summaries)?;
            check_full_cache_never_misses(&summaries, cfg.total_keys)?;
            check_half_cache_miss_fraction(&summaries, cfg.total_keys)?;
            println!("cache ordering and miss-rate checks: ok");
            if let Some(out) = &args.out {
                write_csv(out, CACHE_CSV_HEADER, rows.iter().map(|r| r.csv()))?;
                println!("wrote {}", out.display());
            }
            let _ = std::fs::remove_dir_all(&scratch);
            Ok(())
        }
        Command::Latency { mode, messages } => {
            let modes = match mode {
                Some(m) => vec![m],
                None => vec![BrokerMode::Vanilla, BrokerMode::Ree, BrokerMode::Tee],
            };
            let mut outcomes = Vec::new();
            for mode in modes {
                let outcome = run_latency_macro(&LatencyConfig {
                    mode,
                    messages,
                    ..LatencyConfig::default()
                })
                .await?;
                println!(
                    "{mode}: median {:.1}us mean {:.1}us p99 {:.1}us over {} messages, zero loss",
                    outcome.summary.p50, outcome.summary.mean, outcome.summary.p99, messages
                );
                outcomes.push(outcome);
            }
            if outcomes.len() == 3 {
                check_mode_ordering(&outcomes[0], &outcomes[1], &outcomes[2])?;
                println!(
                    "median ordering vanilla < ree < tee: ok (tee/vanilla ratio {:.2})",
                    outcomes[2].summary.p50 / outcomes[0].summary.p50
                );
            }
            if let Some(out) = &args.out {
                let rows = outcomes.iter().flat_map(|o| {
                    let mode = o.mode;
                    o.delays_us
                        .iter()
                        .enumerate()
                        .map(move |(seq, d)| format!("latency-{mode},{seq},{d:.3}"))
                        .collect::<Vec<_>>()
                });
                write_csv(out, MACRO_CSV_HEADER, rows)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Scaling {
            mode,
            subscribers,
            messages,
        } => {
            let outcome = run_subscriber_scaling(&ScalingConfig {
                mode,
                subscriber_counts: subscribers,
                publishes_per_count: messages,
                ..ScalingConfig::default()
            })
            .await?;
            for p in &outcome.points {
                println!(
                    "{} subscribers: median last-delivery {:.1}us (trusted calls {:?})",
                    p.subscribers, p.median_last_us, p.reencrypt_calls
                );
            }
            if let Some(fit) = &outcome.fit {
                println!(
                    "linear fit: {:.2}us per subscriber, intercept {:.1}us, r² {:.4}",
                    fit.slope, fit.intercept, fit.r_squared
                );
            }
            check_monotone_medians(&outcome)?;
            check_linearity(&outcome, 0.9)?;
            check_reencrypt_counts(&outcome)?;
            println!("monotonicity, linearity and call-count checks: ok");
            if let Some(out) = &args.out {
                let rows = outcome.points.iter().map(|p| {
                    format!("scaling-{mode}-subs{},0,{:.3}", p.subscribers, p.median_last_us)
                });
                write_csv(out, MACRO_CSV_HEADER, rows)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Medtech {
            mode,
            publishers,
            duration,
            broker_bin,
            in_process,
        } => {
            let broker = if in_process {
                BrokerSpawn::InProcess
            } else {
                match broker_bin.or_else(sibling_broker_bin) {
                    Some(bin) => BrokerSpawn::Child(bin),
                    None => {
                        eprintln!(
                            "mqttz-broker not found next to this binary; running in-process \
                             (CPU will not be sampled). Pass --broker-bin to override."
                        );
                        BrokerSpawn::InProcess
                    }
                }
            };
            let cfg = MedtechConfig {
                mode,
                publishers,
                duration: Duration::from_secs(duration),
                broker,
                ..MedtechConfig::default()
            };
            let outcome = run_medtech(&cfg).await?;
            print!("{}", report(&outcome));
            check_rate_cap(&outcome, cfg.per_publisher_cap)?;
            check_aggregate_band(&outcome)?;
            check_zero_loss(&outcome)?;
            println!("rate cap, aggregate band and zero-loss checks: ok");
            if let Some(out) = &args.out {
                write_csv(out, WORKLOAD_CSV_HEADER, outcome.csv_rows())?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    match run(args).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench failed: {e}");
            ExitCode::FAILURE
        }
    }
}
