//! `cachelab`: one binary for the whole timing-attack lab. Serve an oracle,
//! capture timing from it, correlate captures into a candidate key space,
//! search that space, benchmark search throughput, and run the full loop.

use anyhow::Context;
use cachelab_core::analysis::{
    efficiency, extrapolate_search_time, missing_bytes, overhead_multiple, read_bench_report,
    search_bench, write_bench_report, write_plot_data, write_policy_report, PolicyRow,
};
use cachelab_core::cache::CacheConfig;
use cachelab_core::client::{
    brute_force, build_profile, capture, correlate, fetch_scrambled_zeros, keyspace_size,
    read_candidates, read_dataset, read_profile, write_candidates, write_profile, CaptureSpec,
    TimingProfile, DATASET_MAGIC,
};
use cachelab_core::countermeasure::PaddingPolicy;
use cachelab_core::experiment::{run_e2e, ExperimentConfig};
use cachelab_core::server::{serve_until, ClockSource, Oracle, OracleConfig};
use cachelab_core::{AesKey, Block, Error as CoreError};
use clap::{Args, Parser, Subcommand};
use num_bigint::BigUint;
use std::collections::HashMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "cachelab", version, about = "Cache-timing attack laboratory")]
struct Cli {
    /// Flat key=value file supplying defaults for any flag below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the timing oracle until killed.
    Serve {
        /// Secret key, 32 hex digits.
        #[arg(long)]
        key_hex: Option<String>,
        /// none | fixed[:target] | avg
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Cache model file (key = value); defaults to the built-in model.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// sim (deterministic cycle model) | hw (wall-clock timing)
        #[arg(long)]
        mode: Option<String>,
    },
    /// Capture timing samples under a key you know.
    Study(CaptureArgs),
    /// Capture timing samples from the server under attack.
    Attack(CaptureArgs),
    /// Reduce two captures to per-position candidate key bytes.
    Correlate {
        /// Study capture: dataset (.bin) or profile (.csv).
        #[arg(long)]
        study: PathBuf,
        /// Attack capture: dataset (.bin) or profile (.csv).
        #[arg(long)]
        attack: PathBuf,
        /// The study server's key, 32 hex digits.
        #[arg(long)]
        study_key_hex: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Candidate space output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Brute-force a candidate space against the scrambled zeros.
    Search {
        #[arg(long)]
        candidates: PathBuf,
        /// Scrambled zeros, 32 hex digits.
        #[arg(long)]
        zeros: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Measure key-search throughput over synthetic candidate spaces.
    Bench {
        /// Comma-separated key space sizes.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Bench table output file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Log-log plot data output file.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Rebuild countermeasure metrics and plot data from capture files.
    Report {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        attack: PathBuf,
        #[arg(long)]
        study_key_hex: Option<String>,
        /// The attacked server's true key (the experimenter set it).
        #[arg(long)]
        attack_key_hex: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Label for the policy column, e.g. fixed:250.
        #[arg(long)]
        policy_label: Option<String>,
        /// Bench table to extrapolate search time from.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full loop: servers up, capture both sides, correlate, search, report.
    E2e {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        samples: Option<u32>,
        #[arg(long)]
        packet_size: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Gaussian per-round noise on the attacked server.
        #[arg(long)]
        noise: Option<f64>,
        /// Skip the search when log2(keyspace) exceeds this.
        #[arg(long)]
        search_cap_log2: Option<u32>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CaptureArgs {
    /// Oracle address, host:port.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    packet_size: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset output file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the profile CSV here.
    #[arg(long)]
    profile: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// Config and file-format problems exit 2; failures of the experiment
/// itself (unreachable server, search miss surfaced as error) exit 1.
fn exit_code_for(e: &anyhow::Error) -> ExitCode {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) | CoreError::FileFormat { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            };
        }
    }
    ExitCode::from(1)
}

type Kv = HashMap<String, String>;

fn load_kv(path: &Path) -> anyhow::Result<Kv> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Config(format!("config file {}: {e}", path.display())))?;
    let mut kv = Kv::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("{} line {}: expected key = value", path.display(), i + 1))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn kv_parse<T: FromStr>(kv: &Kv, key: &str) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    kv.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| CoreError::Config(format!("config key {key} = {v:?}: {e}")).into())
        })
        .transpose()
}

/// Flag beats config file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_hex_block(what: &str, s: Option<&str>) -> anyhow::Result<[u8; 16]> {
    let s = s.ok_or_else(|| CoreError::Config(format!("{what} is required (32 hex digits)")))?;
    let bytes = hex::decode(s.trim())
        .map_err(|e| CoreError::Config(format!("{what} {s:?}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| CoreError::Config(format!("{what} must be exactly 16 bytes")).into())
}

fn parse_policy(s: &str) -> anyhow::Result<PaddingPolicy> {
    Ok(s.parse::<PaddingPolicy>()?)
}

/// Datasets start with the magic; anything else is read as a profile CSV.
fn load_profile_any(path: &Path) -> anyhow::Result<TimingProfile> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let _ = f.read(&mut magic)?;
    }
    if magic == DATASET_MAGIC {
        let (packet_size, samples) = read_dataset(path)?;
        Ok(build_profile(&samples, packet_size)?)
    } else {
        Ok(read_profile(path)?)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let kv = match &cli.config {
        Some(path) => load_kv(path)?,
        None => Kv::new(),
    };
    match cli.command {
        Command::Serve { key_hex, policy, port, cache, mode } => {
            run_serve(&kv, key_hex, policy, port, cache, mode)
        }
        Command::Study(args) => run_capture(&kv, args, 1),
        Command::Attack(args) => run_capture(&kv, args, 2),
        Command::Correlate { study, attack, study_key_hex, alpha, out } => {
            run_correlate(&kv, study, attack, study_key_hex, alpha, out)
        }
        Command::Search { candidates, zeros, workers } => {
            run_search(&kv, candidates, zeros, workers)
        }
        Command::Bench { sizes, workers, repeats, out, plot } => {
            run_bench(&kv, sizes, workers, repeats, out, plot)
        }
        Command::Report {
            study,
            attack,
            study_key_hex,
            attack_key_hex,
            alpha,
            policy_label,
            bench,
            out_dir,
        } => run_report(
            &kv,
            study,
            attack,
            study_key_hex,
            attack_key_hex,
            alpha,
            policy_label,
            bench,
            out_dir,
        ),
        Command::E2e { policy, samples, packet_size, seed, alpha, noise, search_cap_log2, out_dir } => {
            run_e2e_cmd(&kv, policy, samples, packet_size, seed, alpha, noise, search_cap_log2, out_dir)
        }
    }
}

fn run_serve(
    kv: &Kv,
    key_hex: Option<String>,
    policy: Option<String>,
    port: Option<u16>,
    cache: Option<PathBuf>,
    mode: Option<String>,
) -> anyhow::Result<ExitCode> {
    let key_hex = key_hex.or_else(|| kv.get("key_hex").cloned());
    let secret_key: AesKey = parse_hex_block("--key-hex", key_hex.as_deref())?;
    let policy = parse_policy(&pick(policy, kv.get("policy").cloned(), "none".into()))?;
    let port = pick(port, kv_parse(kv, "port")?, 4433);
    let cache_path = cache.or_else(|| kv.get("cache").map(PathBuf::from));
    let cache = match cache_path {
        Some(p) => CacheConfig::load(&p)
            .map_err(|e| CoreError::Config(format!("cache config {}: {e}", p.display())))?,
        None => CacheConfig::default(),
    };
    let mode = pick(mode, kv.get("mode").cloned(), "sim".into());
    let clock: ClockSource = mode.parse()?;
    let oracle = Oracle::new(OracleConfig { secret_key, policy, clock, cache })?;
    let listener = TcpListener::bind(("127.0.0.1", port))
        .with_context(|| format!("binding 127.0.0.1:{port}"))?;
    println!("listening on {}", listener.local_addr()?);
    serve_until(listener, oracle, Arc::new(AtomicBool::new(false)));
    Ok(ExitCode::SUCCESS)
}

fn run_capture(kv: &Kv, args: CaptureArgs, default_seed: u64) -> anyhow::Result<ExitCode> {
    let addr = pick(args.addr, kv.get("addr").cloned(), "127.0.0.1:4433".into());
    let spec = CaptureSpec {
        n_samples: pick(args.samples, kv_parse(kv, "samples")?, 1 << 16),
        packet_size: pick(args.packet_size, kv_parse(kv, "packet_size")?, 800),
        rng_seed: pick(args.seed, kv_parse(kv, "seed")?, default_seed),
    };
    spec.validate()?;
    let samples = capture(&addr, &spec, &args.out)
        .with_context(|| format!("capturing {} samples from {addr}", spec.n_samples))?;
    println!("captured {} samples to {}", samples.len(), args.out.display());
    let zeros = fetch_scrambled_zeros(&addr)
        .with_context(|| format!("fetching scrambled zeros from {addr}"))?;
    println!("scrambled zeros = {}", hex::encode(zeros));
    if let Some(profile_path) = args.profile {
        let profile = build_profile(&samples, spec.packet_size)?;
        write_profile(
            &profile_path,
            &profile,
            &[
                format!("rng_seed = {}", spec.rng_seed),
                format!("samples = {}", samples.len()),
                format!("addr = {addr}"),
            ],
        )?;
        println!("profile written to {}", profile_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_correlate(
    kv: &Kv,
    study: PathBuf,
    attack: PathBuf,
    study_key_hex: Option<String>,
    alpha: Option<f64>,
    out: PathBuf,
) -> anyhow::Result<ExitCode> {
    let study_key_hex = study_key_hex.or_else(|| kv.get("study_key_hex").cloned());
    let study_key: AesKey = parse_hex_block("--study-key-hex", study_key_hex.as_deref())?;
    let alpha = pick(alpha, kv_parse(kv, "alpha")?, 2.0);
    let study_profile = load_profile_any(&study)?;
    let attack_profile = load_profile_any(&attack)?;
    let cs = correlate(&study_profile, &study_key, &attack_profile, alpha)?;
    write_candidates(
        &out,
        &cs,
        &[
            format!("alpha = {alpha}"),
            format!("study = {}", study.display()),
            format!("attack = {}", attack.display()),
        ],
    )?;
    let ks = keyspace_size(&cs);
    println!("candidate counts: {:?}", cs.counts());
    println!("keyspace = {ks} (log2 = {:.2})", log2_of(&ks));
    println!("candidates written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn log2_of(ks: &BigUint) -> f64 {
    cachelab_core::analysis::log10_keyspace(ks) / std::f64::consts::LOG10_2
}

fn run_search(
    kv: &Kv,
    candidates: PathBuf,
    zeros: Option<String>,
    workers: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let zeros_hex = zeros.or_else(|| kv.get("zeros").cloned());
    let zeros: Block = parse_hex_block("--zeros", zeros_hex.as_deref())?;
    let cs = read_candidates(&candidates)?;
    let outcome = match pick(workers, kv_parse(kv, "workers")?, 0) {
        0 => brute_force(&cs, &zeros),
        n => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CoreError::Config(format!("thread pool: {e}")))?;
            pool.install(|| brute_force(&cs, &zeros))
        }
    };
    match outcome.found {
        Some(key) => {
            println!("found {} after {} keys", hex::encode(key), outcome.keys_tested);
            Ok(ExitCode::SUCCESS)
        }
        None => {
            println!("not-found after {} keys", outcome.keys_tested);
            Ok(ExitCode::FAILURE)
        }
    }
}

fn run_bench(
    kv: &Kv,
    sizes: Option<String>,
    workers: Option<usize>,
    repeats: Option<usize>,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let sizes_text = pick(
        sizes,
        kv.get("sizes").cloned(),
        "10000,100000,1000000,10000000,100000000".into(),
    );
    let sizes: Vec<u64> = sizes_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CoreError::Config(format!("bad size {s:?}: {e}")).into())
        })
        .collect::<anyhow::Result<_>>()?;
    let workers = pick(workers, kv_parse(kv, "workers")?, 4);
    let repeats = pick(repeats, kv_parse(kv, "repeats")?, 3);
    let bench = search_bench(&sizes, workers, repeats)?;
    println!("workers = {}", bench.workers);
    for row in &bench.rows {
        println!("{:>12} keys  {:>12.6} s", row.keyspace, row.seconds);
    }
    println!("seconds_per_key = {:e}", bench.seconds_per_key);
    if let Some(path) = out {
        write_bench_report(&path, &bench)?;
        println!("bench table written to {}", path.display());
    }
    if let Some(path) = plot {
        let points: Vec<(BigUint, f64)> =
            bench.rows.iter().map(|r| (BigUint::from(r.keyspace), r.seconds)).collect();
        write_plot_data(&path, &points)?;
        println!("plot data written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn run_report(
    kv: &Kv,
    study: PathBuf,
    attack: PathBuf,
    study_key_hex: Option<String>,
    attack_key_hex: Option<String>,
    alpha: Option<f64>,
    policy_label: Option<String>,
    bench: Option<PathBuf>,
    out_dir: PathBuf,
) -> anyhow::Result<ExitCode> {
    let study_key_hex = study_key_hex.or_else(|| kv.get("study_key_hex").cloned());
    let study_key: AesKey = parse_hex_block("--study-key-hex", study_key_hex.as_deref())?;
    let attack_key_hex = attack_key_hex.or_else(|| kv.get("attack_key_hex").cloned());
    let attack_key: AesKey = parse_hex_block("--attack-key-hex", attack_key_hex.as_deref())?;
    let alpha = pick(alpha, kv_parse(kv, "alpha")?, 2.0);
    let policy_label = pick(policy_label, kv.get("policy_label").cloned(), "unknown".into());
    std::fs::create_dir_all(&out_dir)?;

    let study_profile = load_profile_any(&study)?;
    let attack_profile = load_profile_any(&attack)?;
    let cs = correlate(&study_profile, &study_key, &attack_profile, alpha)?;
    let ks = keyspace_size(&cs);
    let m = missing_bytes(&cs, &attack_key);
    let s = overhead_multiple(attack_profile.grand_mean(), study_profile.grand_mean());
    let eff = efficiency(m as f64, s);
    write_policy_report(
        &out_dir.join("policy.csv"),
        &[PolicyRow {
            policy: policy_label.clone(),
            m: m as f64,
            avg_cycles: attack_profile.grand_mean(),
            s,
            efficiency: eff,
        }],
    )?;
    println!("policy {policy_label}: m = {m}, s = {s:.2}, efficiency = {eff:.2}");
    println!("keyspace = {ks} (log2 = {:.2})", log2_of(&ks));

    if let Some(bench_path) = bench {
        let bench = read_bench_report(&bench_path)?;
        let (seconds, years) = extrapolate_search_time(&ks, bench.seconds_per_key);
        println!("projected search: {seconds:.3e} s = {years:.3e} years");
        let mut points: Vec<(BigUint, f64)> =
            bench.rows.iter().map(|r| (BigUint::from(r.keyspace), r.seconds)).collect();
        if seconds > 0.0 {
            points.push((ks.clone(), seconds));
        }
        write_plot_data(&out_dir.join("plot.csv"), &points)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn run_e2e_cmd(
    kv: &Kv,
    policy: Option<String>,
    samples: Option<u32>,
    packet_size: Option<u32>,
    seed: Option<u64>,
    alpha: Option<f64>,
    noise: Option<f64>,
    search_cap_log2: Option<u32>,
    out_dir: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let policy = parse_policy(&pick(policy, kv.get("policy").cloned(), "none".into()))?;
    let out_dir = pick(out_dir, kv.get("out_dir").map(PathBuf::from), PathBuf::from("e2e-out"));
    let seed = pick(seed, kv_parse(kv, "seed")?, 7);
    let mut config = ExperimentConfig::new(out_dir.clone(), policy, seed);
    config.n_samples = pick(samples, kv_parse(kv, "samples")?, config.n_samples);
    config.packet_size = pick(packet_size, kv_parse(kv, "packet_size")?, config.packet_size);
    config.alpha = pick(alpha, kv_parse(kv, "alpha")?, config.alpha);
    config.noise_stddev = pick(noise, kv_parse(kv, "noise_stddev")?, config.noise_stddev);
    config.search_cap_log2 =
        pick(search_cap_log2, kv_parse(kv, "search_cap_log2")?, config.search_cap_log2);
    let report = run_e2e(&config)?;
    print!("{}", std::fs::read_to_string(out_dir.join("summary.txt"))?);
    if report.success {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
