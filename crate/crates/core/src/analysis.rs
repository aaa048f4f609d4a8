//! Scoring and extrapolation helpers: the countermeasure efficiency metric,
//! key-search throughput benchmarks over synthetic candidate spaces, and the
//! CSV reports the command-line tools emit.

use crate::aes::{self, AesKey, Block};
use crate::client::{brute_force, CandidateKeySpace};
use crate::{Error, Result};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

pub const SECONDS_PER_YEAR: f64 = 3.156e7;

/// Key bytes whose true value fell outside the candidate set.
pub fn missing_bytes(cs: &CandidateKeySpace, true_key: &AesKey) -> usize {
    (0..16).filter(|&j| !cs.contains(j, true_key[j])).count()
}

/// Slowdown factor of a protected server relative to the unprotected one.
pub fn overhead_multiple(avg_cycles_protected: f64, avg_cycles_unprotected: f64) -> f64 {
    avg_cycles_protected / avg_cycles_unprotected
}

/// A countermeasure recovering `m` key bytes of margin at slowdown `s`
/// scores `m / s`; higher is a better trade.
pub fn efficiency(m: f64, s: f64) -> f64 {
    m / s
}

/// Splits `size` into per-position candidate counts, greedily taking the
/// largest divisor that fits in one byte position each time.
fn factor_counts(size: u64) -> Result<Vec<u64>> {
    if size == 0 {
        return Err(Error::Config("keyspace size must be >= 1".into()));
    }
    let mut counts = Vec::new();
    let mut rest = size;
    while rest > 1 {
        let factor = (2..=256u64.min(rest)).rev().find(|f| rest % f == 0).ok_or_else(|| {
            Error::Config(format!("size {size} has a prime factor above 256"))
        })?;
        counts.push(factor);
        rest /= factor;
        if counts.len() > 16 {
            return Err(Error::Config(format!("size {size} needs more than 16 positions")));
        }
    }
    Ok(counts)
}

/// A candidate space of exactly `size` keys containing `true_key` as its
/// final odometer entry, so an exhaustive search both touches every key and
/// exercises the match path.
pub fn synthetic_candidates(size: u64, true_key: &AesKey) -> Result<CandidateKeySpace> {
    let counts = factor_counts(size)?;
    let candidates = (0..16)
        .map(|j| {
            let n = counts.get(j).copied().unwrap_or(1) as usize;
            let mut cands = Vec::with_capacity(n);
            let mut filler = true_key[j].wrapping_add(1);
            for _ in 0..n - 1 {
                cands.push(filler);
                filler = filler.wrapping_add(1);
            }
            cands.push(true_key[j]);
            cands
        })
        .collect();
    Ok(CandidateKeySpace { candidates })
}

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub keyspace: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SearchBench {
    pub rows: Vec<BenchRow>,
    /// Least-squares rate of the `seconds = rate * keyspace` fit through the
    /// origin, dominated by the largest spaces measured.
    pub seconds_per_key: f64,
    pub workers: usize,
}

const BENCH_KEY: AesKey = [0x5a; 16];

/// Times full searches of synthetic spaces of the given sizes on a dedicated
/// pool of `workers` threads; each size is run `repeats` times and the median
/// kept.
pub fn search_bench(sizes: &[u64], workers: usize, repeats: usize) -> Result<SearchBench> {
    if sizes.is_empty() || repeats == 0 || workers == 0 {
        return Err(Error::Config("bench needs sizes, workers and repeats >= 1".into()));
    }
    let rk = aes::expand_key(&BENCH_KEY);
    let zeros: Block = aes::encrypt_block(&rk, &[0u8; 16]);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let cs = synthetic_candidates(size, &BENCH_KEY)?;
        let mut runs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let outcome = pool.install(|| brute_force(&cs, &zeros));
            runs.push(start.elapsed().as_secs_f64());
            assert_eq!(outcome.found, Some(BENCH_KEY));
            assert_eq!(outcome.keys_tested, size as u128);
        }
        runs.sort_by(f64::total_cmp);
        rows.push(BenchRow { keyspace: size, seconds: runs[repeats / 2] });
    }
    let num: f64 = rows.iter().map(|r| r.seconds * r.keyspace as f64).sum();
    let den: f64 = rows.iter().map(|r| (r.keyspace as f64).powi(2)).sum();
    Ok(SearchBench { rows, seconds_per_key: num / den, workers })
}

/// Projects a measured per-key rate onto an arbitrarily large key space.
/// Returns (seconds, years).
pub fn extrapolate_search_time(keyspace: &BigUint, seconds_per_key: f64) -> (f64, f64) {
    let keys = keyspace.to_f64().unwrap_or(f64::INFINITY);
    let seconds = keys * seconds_per_key;
    (seconds, seconds / SECONDS_PER_YEAR)
}

pub fn log10_keyspace(keyspace: &BigUint) -> f64 {
    let keys = keyspace.to_f64().unwrap_or(f64::INFINITY);
    if keys.is_finite() {
        keys.log10()
    } else {
        keyspace.bits() as f64 * std::f64::consts::LOG10_2
    }
}

#[derive(Clone, Debug)]
pub struct PolicyRow {
    pub policy: String,
    pub m: f64,
    pub avg_cycles: f64,
    pub s: f64,
    pub efficiency: f64,
}

pub fn write_policy_report(path: &Path, rows: &[PolicyRow]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "policy,m,avg_cycles,s,efficiency")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.policy, r.m, r.avg_cycles, r.s, r.efficiency
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bench_report(path: &Path, bench: &SearchBench) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# workers = {}", bench.workers)?;
    writeln!(w, "# seconds_per_key = {:e}", bench.seconds_per_key)?;
    writeln!(w, "keyspace,seconds")?;
    for r in &bench.rows {
        writeln!(w, "{},{:e}", r.keyspace, r.seconds)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_report(path: &Path) -> Result<SearchBench> {
    let bad = |reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    let mut workers = None;
    let mut seconds_per_key = None;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("workers =") {
                workers = Some(v.trim().parse().map_err(|_| bad("bad workers".into()))?);
            } else if let Some(v) = comment.strip_prefix("seconds_per_key =") {
                seconds_per_key =
                    Some(v.trim().parse().map_err(|_| bad("bad seconds_per_key".into()))?);
            }
            continue;
        }
        if !seen_header {
            if line != "keyspace,seconds" {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            seen_header = true;
            continue;
        }
        let (ks, secs) = line.split_once(',').ok_or_else(|| bad(format!("bad row {line:?}")))?;
        rows.push(BenchRow {
            keyspace: ks.trim().parse().map_err(|_| bad(format!("bad keyspace {ks:?}")))?,
            seconds: secs.trim().parse().map_err(|_| bad(format!("bad seconds {secs:?}")))?,
        });
    }
    match (workers, seconds_per_key, rows.is_empty()) {
        (Some(workers), Some(seconds_per_key), false) => {
            Ok(SearchBench { rows, seconds_per_key, workers })
        }
        _ => Err(bad("missing workers, rate or rows".into())),
    }
}

/// Log-log points for plotting projected search time against key space size.
pub fn write_plot_data(path: &Path, points: &[(BigUint, f64)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "log10_keyspace,log10_seconds")?;
    for (keyspace, seconds) in points {
        writeln!(w, "{:.4},{:.4}", log10_keyspace(keyspace), seconds.log10())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::keyspace_size;

    #[test]
    fn factor_counts_use_the_largest_byte_sized_divisors() {
        assert_eq!(factor_counts(100_000_000).unwrap(), vec![256, 125, 125, 25]);
        assert_eq!(factor_counts(100_000).unwrap(), vec![250, 200, 2]);
        assert_eq!(factor_counts(10_000).unwrap(), vec![250, 40]);
        assert_eq!(factor_counts(1).unwrap(), Vec::<u64>::new());
        assert!(factor_counts(257).is_err(), "prime above one byte");
    }

    #[test]
    fn synthetic_space_has_exact_size_and_key_last() {
        let key: AesKey = core::array::from_fn(|i| i as u8 ^ 0x5a);
        for size in [1u64, 2, 10_000, 100_000] {
            let cs = synthetic_candidates(size, &key).unwrap();
            assert_eq!(keyspace_size(&cs), BigUint::from(size));
            for j in 0..16 {
                assert_eq!(*cs.candidates[j].last().unwrap(), key[j], "position {j}");
                let dups = cs.candidates[j]
                    .iter()
                    .filter(|&&b| b == key[j])
                    .count();
                assert_eq!(dups, 1, "true byte must appear once");
            }
        }
    }

    #[test]
    fn bench_on_small_spaces_reports_positive_rates() {
        let bench = search_bench(&[1_000, 10_000], 2, 1).unwrap();
        assert_eq!(bench.rows.len(), 2);
        assert!(bench.rows.iter().all(|r| r.seconds > 0.0));
        assert!(bench.seconds_per_key > 0.0);
        assert_eq!(bench.workers, 2);
    }

    #[test]
    fn extrapolation_matches_hand_arithmetic() {
        let rate = 1.86e-8;
        let ks = BigUint::parse_bytes(b"940000000000000000000000000000000000", 10).unwrap();
        let (seconds, years) = extrapolate_search_time(&ks, rate);
        assert!((seconds / 1.7484e28 - 1.0).abs() < 1e-3, "{seconds:e}");
        assert!((years / 5.54e20 - 1.0).abs() < 1e-2, "{years:e}");

        let ks = BigUint::parse_bytes(b"210000000000000000000000000000000000000", 10).unwrap();
        let (_, years) = extrapolate_search_time(&ks, rate);
        assert!((years / 1.2376e23 - 1.0).abs() < 1e-2, "{years:e}");
    }

    #[test]
    fn log10_handles_sizes_beyond_f64() {
        let ks = BigUint::from(1u8) << 128;
        assert!((log10_keyspace(&ks) - 38.53).abs() < 0.01);
        let huge = BigUint::from(1u8) << 4096;
        assert!((log10_keyspace(&huge) - 4097.0 * std::f64::consts::LOG10_2).abs() < 1.0);
    }

    #[test]
    fn efficiency_is_margin_over_slowdown() {
        assert!((efficiency(3.0, 2.10) - 1.43).abs() < 0.01);
        assert!((efficiency(2.0, 1.19) - 1.68).abs() < 0.01);
        assert_eq!(efficiency(0.0, 5.0), 0.0);
    }

    #[test]
    fn missing_bytes_counts_dropped_positions() {
        let key: AesKey = [7u8; 16];
        let mut cs = CandidateKeySpace { candidates: vec![vec![7u8, 9]; 16] };
        assert_eq!(missing_bytes(&cs, &key), 0);
        cs.candidates[2] = vec![1, 2];
        cs.candidates[13] = vec![3];
        assert_eq!(missing_bytes(&cs, &key), 2);
    }

    #[test]
    fn policy_report_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_policy_report(
            &path,
            &[PolicyRow {
                policy: "fixed:250".into(),
                m: 3.0,
                avg_cycles: 2100.5,
                s: 2.10,
                efficiency: 1.43,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "policy,m,avg_cycles,s,efficiency");
        assert_eq!(lines[1], "fixed:250,3.00,2100.50,2.10,1.43");

        write_policy_report(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "policy,m,avg_cycles,s,efficiency\n");
    }

    #[test]
    fn bench_and_plot_reports_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let bench = SearchBench {
            rows: vec![BenchRow { keyspace: 100_000, seconds: 0.002 }],
            seconds_per_key: 2e-8,
            workers: 4,
        };
        let bpath = dir.path().join("bench.csv");
        write_bench_report(&bpath, &bench).unwrap();
        let text = std::fs::read_to_string(&bpath).unwrap();
        assert!(text.contains("# workers = 4"));
        assert!(text.contains("keyspace,seconds"));
        assert!(text.contains("100000,"));

        let back = read_bench_report(&bpath).unwrap();
        assert_eq!(back.workers, 4);
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.rows[0].keyspace, 100_000);
        assert!((back.seconds_per_key - 2e-8).abs() < 1e-15);

        let ppath = dir.path().join("plot.csv");
        write_plot_data(&ppath, &[(BigUint::from(100_000u32), 0.002)]).unwrap();
        let text = std::fs::read_to_string(&ppath).unwrap();
        assert!(text.starts_with("log10_keyspace,log10_seconds\n"));
        assert!(text.contains("5.0000,-2.6990"));
    }
}
