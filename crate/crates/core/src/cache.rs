//! Deterministic cache model: prices a lookup trace in cycles, per round.
//!
//! Five tables are modeled: the four 1 KiB round tables (4-byte entries) and
//! the 256-byte final-round S-box (1-byte entries). Residency is tracked per
//! cache line, fully associative, no eviction within one packet.
//!
//! Two switches extend the basic cold-start model to make a co-tenant's
//! working set expressible:
//!
//! * `warm_start`: the packet begins with every line resident instead of none,
//!   except contended lines.
//! * `contended_per_table`: that many lines per 1 KiB of table (so a quarter
//!   as many on the S-box) are permanently contended: a competing working set
//!   keeps evicting them, so they never become resident and always miss.
//!   Which lines are contended is a pseudorandom function of `rng_seed` only.
//!
//! Both default off, which is the plain cold-start model.

use crate::aes::{LookupTrace, LOOKUPS_PER_ROUND, SBOX_TABLE_ID};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

pub const NUM_TABLES: usize = 5;
const TABLE_BYTES: [u32; NUM_TABLES] = [1024, 1024, 1024, 1024, 256];
const ENTRY_BYTES: [u32; NUM_TABLES] = [4, 4, 4, 4, 1];

/// Largest line count any table can have (line_size_bytes = 1 on a 1 KiB table).
const MAX_LINE_WORDS: usize = 1024 / 64;

const CONTENDED_STREAM: u64 = 0x636f_6e74_656e_6465;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheConfig {
    pub line_size_bytes: u32,
    pub hit_cycles: u32,
    pub miss_cycles: u32,
    pub base_round_cycles: u32,
    pub noise_stddev_cycles: f64,
    pub rng_seed: u64,
    pub warm_start: bool,
    pub contended_per_table: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_size_bytes: 64,
            hit_cycles: 3,
            miss_cycles: 40,
            base_round_cycles: 50,
            noise_stddev_cycles: 0.0,
            rng_seed: 0,
            warm_start: false,
            contended_per_table: 0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.line_size_bytes == 0 {
            return Err(Error::Config("line_size_bytes must be positive".into()));
        }
        for bytes in TABLE_BYTES {
            if self.line_size_bytes > bytes || bytes % self.line_size_bytes != 0 {
                return Err(Error::Config(format!(
                    "line_size_bytes {} does not divide table size {}",
                    self.line_size_bytes, bytes
                )));
            }
        }
        if self.miss_cycles < self.hit_cycles {
            return Err(Error::Config(format!(
                "miss_cycles {} below hit_cycles {}",
                self.miss_cycles, self.hit_cycles
            )));
        }
        if !(self.noise_stddev_cycles >= 0.0) {
            return Err(Error::Config("noise_stddev_cycles must be >= 0".into()));
        }
        if self.contended_per_table > self.lines_in_table(0) {
            return Err(Error::Config(format!(
                "contended_per_table {} exceeds {} lines per table",
                self.contended_per_table,
                self.lines_in_table(0)
            )));
        }
        Ok(())
    }

    pub fn lines_in_table(&self, table_id: u8) -> u32 {
        TABLE_BYTES[table_id as usize] / self.line_size_bytes
    }

    /// Cache line holding the first byte of an entry.
    pub fn line_of(&self, table_id: u8, index: u8) -> u32 {
        index as u32 * ENTRY_BYTES[table_id as usize] / self.line_size_bytes
    }

    fn contended_lines(&self, table_id: u8) -> u32 {
        // proportional to table size: a 1 KiB table gets the configured count
        self.contended_per_table * TABLE_BYTES[table_id as usize] / 1024
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "line_size_bytes = {}", self.line_size_bytes);
        let _ = writeln!(s, "hit_cycles = {}", self.hit_cycles);
        let _ = writeln!(s, "miss_cycles = {}", self.miss_cycles);
        let _ = writeln!(s, "base_round_cycles = {}", self.base_round_cycles);
        let _ = writeln!(s, "noise_stddev_cycles = {}", self.noise_stddev_cycles);
        let _ = writeln!(s, "rng_seed = {}", self.rng_seed);
        let _ = writeln!(s, "warm_start = {}", self.warm_start);
        let _ = writeln!(s, "contended_per_table = {}", self.contended_per_table);
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = CacheConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::Config(format!("line {}: {key}: {e}", lineno + 1))
            };
            match key {
                "line_size_bytes" => cfg.line_size_bytes = value.parse().map_err(|e| bad(&e))?,
                "hit_cycles" => cfg.hit_cycles = value.parse().map_err(|e| bad(&e))?,
                "miss_cycles" => cfg.miss_cycles = value.parse().map_err(|e| bad(&e))?,
                "base_round_cycles" => cfg.base_round_cycles = value.parse().map_err(|e| bad(&e))?,
                "noise_stddev_cycles" => {
                    cfg.noise_stddev_cycles = value.parse().map_err(|e| bad(&e))?
                }
                "rng_seed" => cfg.rng_seed = value.parse().map_err(|e| bad(&e))?,
                "warm_start" => cfg.warm_start = value.parse().map_err(|e| bad(&e))?,
                "contended_per_table" => {
                    cfg.contended_per_table = value.parse().map_err(|e| bad(&e))?
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

type LineMask = [u64; MAX_LINE_WORDS];

fn mask_get(m: &LineMask, line: u32) -> bool {
    m[(line / 64) as usize] >> (line % 64) & 1 == 1
}

fn mask_set(m: &mut LineMask, line: u32) {
    m[(line / 64) as usize] |= 1 << (line % 64);
}

/// Per-table line residency for one packet in flight.
#[derive(Clone)]
pub struct CacheState {
    config: CacheConfig,
    resident: [LineMask; NUM_TABLES],
    contended: [LineMask; NUM_TABLES],
}

impl CacheState {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let mut contended = [[0u64; MAX_LINE_WORDS]; NUM_TABLES];
        for t in 0..NUM_TABLES as u8 {
            let lines = config.lines_in_table(t);
            let wanted = config.contended_lines(t).min(lines);
            if wanted == 0 {
                continue;
            }
            // Fisher-Yates prefix: `wanted` distinct lines, a function of the
            // seed and table only, shared by any simulation of this config.
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.rng_seed ^ CONTENDED_STREAM ^ (t as u64) << 56);
            let mut pool: Vec<u32> = (0..lines).collect();
            for i in 0..wanted as usize {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
                mask_set(&mut contended[t as usize], pool[i]);
            }
        }
        let mut state = CacheState { config, resident: Default::default(), contended };
        state.reset_for_packet();
        Ok(state)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Start-of-packet state: empty, or everything but contended lines when
    /// warm. Idempotent.
    pub fn reset_for_packet(&mut self) {
        for t in 0..NUM_TABLES {
            if self.config.warm_start {
                let lines = self.config.lines_in_table(t as u8);
                let mut all = [0u64; MAX_LINE_WORDS];
                for line in 0..lines {
                    mask_set(&mut all, line);
                }
                for w in 0..MAX_LINE_WORDS {
                    self.resident[t][w] = all[w] & !self.contended[t][w];
                }
            } else {
                self.resident[t] = [0; MAX_LINE_WORDS];
            }
        }
    }

    pub fn is_resident(&self, table_id: u8, index: u8) -> bool {
        mask_get(&self.resident[table_id as usize], self.config.line_of(table_id, index))
    }

    /// Cost of touching one entry. A resident line hits; anything else misses.
    /// The line becomes resident afterwards unless it is contended.
    pub fn charge_access(&mut self, table_id: u8, index: u8) -> u64 {
        let line = self.config.line_of(table_id, index);
        let t = table_id as usize;
        if mask_get(&self.contended[t], line) {
            return self.config.miss_cycles as u64;
        }
        if mask_get(&self.resident[t], line) {
            self.config.hit_cycles as u64
        } else {
            mask_set(&mut self.resident[t], line);
            self.config.miss_cycles as u64
        }
    }
}

fn fnv1a64(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Converts a trace into per-round cycle counts.
///
/// Each 16-lookup round costs `base_round_cycles` plus its access costs, plus
/// (when `noise_stddev_cycles > 0`) a rounded gaussian term, clamped at zero.
/// The cache persists across rounds and blocks of the trace and is reset at
/// the start. With noise off the result is a pure function of (trace, config);
/// with noise on it is still reproducible, the generator being seeded from
/// `rng_seed` and the trace contents, but differs between unequal traces.
pub fn simulate_encryption(trace: &LookupTrace, config: &CacheConfig) -> Result<Vec<u64>> {
    if trace.accesses.is_empty() || trace.accesses.len() % LOOKUPS_PER_ROUND != 0 {
        return Err(Error::Trace(format!(
            "{} accesses is not a whole number of 16-lookup rounds",
            trace.accesses.len()
        )));
    }
    for a in &trace.accesses {
        if a.table_id > SBOX_TABLE_ID || a.round > 9 {
            return Err(Error::Trace(format!(
                "access out of range: table {} round {}",
                a.table_id, a.round
            )));
        }
    }

    let mut state = CacheState::new(config.clone())?;
    let mut noise = if config.noise_stddev_cycles > 0.0 {
        let seed = config.rng_seed
            ^ fnv1a64(trace.accesses.iter().flat_map(|a| [a.table_id, a.index, a.round]));
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, config.noise_stddev_cycles)
            .map_err(|e| Error::Config(format!("noise_stddev_cycles: {e}")))?;
        Some((rng, dist))
    } else {
        None
    };

    let mut rounds = Vec::with_capacity(trace.rounds());
    for chunk in trace.accesses.chunks_exact(LOOKUPS_PER_ROUND) {
        let mut cycles = config.base_round_cycles as i64;
        for a in chunk {
            cycles += state.charge_access(a.table_id, a.index) as i64;
        }
        if let Some((rng, dist)) = noise.as_mut() {
            cycles += dist.sample(rng).round() as i64;
        }
        rounds.push(cycles.max(0) as u64);
    }
    Ok(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::Access;

    fn trace_of(entries: &[(u8, u8, u8)]) -> LookupTrace {
        LookupTrace {
            accesses: entries
                .iter()
                .map(|&(table_id, index, round)| Access { table_id, index, round })
                .collect(),
        }
    }

    /// 16 lookups touching 16 distinct cold lines at default geometry:
    /// indices 0,16,32,48 per round table are 64 bytes apart.
    fn distinct_line_round(round: u8) -> Vec<(u8, u8, u8)> {
        let mut v = Vec::new();
        for slot in 0..4u8 {
            for t in 0..4u8 {
                v.push((t, slot * 16, round));
            }
        }
        v
    }

    #[test]
    fn cold_round_of_distinct_lines_costs_690() {
        let trace = trace_of(&distinct_line_round(0));
        let rounds = simulate_encryption(&trace, &CacheConfig::default()).unwrap();
        assert_eq!(rounds, vec![50 + 16 * 40]);
    }

    #[test]
    fn repeated_round_costs_98() {
        let mut entries = distinct_line_round(0);
        let mut second: Vec<_> = distinct_line_round(1);
        entries.append(&mut second);
        let rounds = simulate_encryption(&trace_of(&entries), &CacheConfig::default()).unwrap();
        assert_eq!(rounds, vec![690, 50 + 16 * 3]);
    }

    #[test]
    fn first_access_misses_then_same_line_hits() {
        let mut state = CacheState::new(CacheConfig::default()).unwrap();
        assert_eq!(state.charge_access(0, 5), 40);
        assert_eq!(state.charge_access(0, 5), 3);
        // 64-byte lines, 4-byte entries: index 6 shares the 16-entry line of 5
        assert_eq!(state.charge_access(0, 6), 3);
        assert_eq!(state.charge_access(0, 16), 40);
    }

    #[test]
    fn reset_clears_residency_and_is_idempotent() {
        let mut state = CacheState::new(CacheConfig::default()).unwrap();
        state.charge_access(2, 99);
        assert!(state.is_resident(2, 99));
        state.reset_for_packet();
        assert!(!state.is_resident(2, 99));
        state.reset_for_packet();
        assert_eq!(state.charge_access(2, 99), 40);
    }

    #[test]
    fn simulation_is_deterministic_with_noise_off() {
        let trace = trace_of(&distinct_line_round(0));
        let cfg = CacheConfig::default();
        assert_eq!(
            simulate_encryption(&trace, &cfg).unwrap(),
            simulate_encryption(&trace, &cfg).unwrap()
        );
    }

    #[test]
    fn noise_is_reproducible_but_trace_dependent() {
        let cfg = CacheConfig { noise_stddev_cycles: 10.0, ..CacheConfig::default() };
        let a = trace_of(&distinct_line_round(0));
        let mut entries = distinct_line_round(0);
        entries[0].1 ^= 1;
        let b = trace_of(&entries);
        let ra = simulate_encryption(&a, &cfg).unwrap();
        assert_eq!(ra, simulate_encryption(&a, &cfg).unwrap());
        let rb = simulate_encryption(&b, &cfg).unwrap();
        assert_ne!(ra, rb);
    }

    #[test]
    fn noise_shifts_rounds_around_base_cost() {
        let cfg = CacheConfig { noise_stddev_cycles: 5.0, ..CacheConfig::default() };
        let rounds = simulate_encryption(&trace_of(&distinct_line_round(0)), &cfg).unwrap();
        let r = rounds[0] as i64;
        assert!((r - 690).abs() < 50, "round {r} unreasonably far from 690");
    }

    #[test]
    fn warm_start_makes_everything_hit() {
        let cfg = CacheConfig { warm_start: true, ..CacheConfig::default() };
        let rounds = simulate_encryption(&trace_of(&distinct_line_round(0)), &cfg).unwrap();
        assert_eq!(rounds, vec![50 + 16 * 3]);
    }

    #[test]
    fn contended_lines_always_miss() {
        let cfg = CacheConfig {
            line_size_bytes: 4,
            warm_start: true,
            contended_per_table: 16,
            rng_seed: 9,
            ..CacheConfig::default()
        };
        let mut state = CacheState::new(cfg.clone()).unwrap();
        let mut contended_seen = 0;
        for index in 0..=255u8 {
            let c1 = state.charge_access(0, index);
            let c2 = state.charge_access(0, index);
            if c1 == 40 {
                assert_eq!(c2, 40, "contended line became resident at index {index}");
                contended_seen += 1;
            } else {
                assert_eq!((c1, c2), (3, 3));
            }
        }
        assert_eq!(contended_seen, 16);
        // same seed picks the same lines; different seed picks other lines
        let again = CacheState::new(cfg.clone()).unwrap();
        let other = CacheState::new(CacheConfig { rng_seed: 10, ..cfg }).unwrap();
        assert_eq!(again.contended, state.contended);
        assert_ne!(other.contended, state.contended);
    }

    #[test]
    fn sbox_gets_a_quarter_of_the_contended_lines() {
        let cfg = CacheConfig {
            line_size_bytes: 4,
            contended_per_table: 16,
            ..CacheConfig::default()
        };
        assert_eq!(cfg.contended_lines(0), 16);
        assert_eq!(cfg.contended_lines(4), 4);
        assert_eq!(cfg.lines_in_table(0), 256);
        assert_eq!(cfg.lines_in_table(4), 64);
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = CacheConfig {
            line_size_bytes: 4,
            hit_cycles: 2,
            miss_cycles: 55,
            base_round_cycles: 10,
            noise_stddev_cycles: 1.5,
            rng_seed: 42,
            warm_start: true,
            contended_per_table: 8,
        };
        assert_eq!(CacheConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_partial_file_keeps_defaults() {
        let cfg = CacheConfig::from_text("# comment\nmiss_cycles = 100\n").unwrap();
        assert_eq!(cfg.miss_cycles, 100);
        assert_eq!(cfg.hit_cycles, 3);
        assert_eq!(cfg.line_size_bytes, 64);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_geometry() {
        assert!(CacheConfig::from_text("cache_size = 9").is_err());
        assert!(CacheConfig::from_text("line_size_bytes = 48").is_err());
        assert!(CacheConfig::from_text("hit_cycles = 50\nmiss_cycles = 10").is_err());
    }

    #[test]
    fn trace_length_must_be_whole_rounds() {
        let trace = trace_of(&[(0, 0, 0); 15]);
        assert!(simulate_encryption(&trace, &CacheConfig::default()).is_err());
    }

    #[test]
    fn higher_miss_cost_never_lowers_rounds() {
        let mut entries = distinct_line_round(0);
        entries.extend(distinct_line_round(1));
        entries[17].1 = 200;
        let trace = trace_of(&entries);
        let base = simulate_encryption(&trace, &CacheConfig::default()).unwrap();
        let dearer = simulate_encryption(
            &trace,
            &CacheConfig { miss_cycles: 80, ..CacheConfig::default() },
        )
        .unwrap();
        assert!(dearer.iter().zip(&base).all(|(d, b)| d >= b));
    }
}
