//! The attacker's half of the lab: drive the oracle with random payloads,
//! profile cycle counts per plaintext byte, correlate a known-key profile
//! against an unknown-key profile to shrink the key space, then search it.
//!
//! The attack is first-round only: position `j` of the first payload block
//! indexes table `j % 4` at `plaintext[j] ^ key[j]`, so per-byte timing
//! signatures of two servers line up under an XOR shift of `k0[j] ^ k1[j]`.
//! Payload bytes past the first block act as timing load and are not profiled.

use crate::aes::{self, AesKey, Block};
use crate::server::RESPONSE_BYTES;
use crate::{Error, Result};
use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::path::Path;

pub const POSITIONS: usize = 16;
pub const VALUES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingSample {
    /// First 16 bytes of the payload that was timed.
    pub plaintext: Block,
    pub cycles: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct CaptureSpec {
    pub n_samples: u32,
    pub packet_size: u32,
    pub rng_seed: u64,
}

impl CaptureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.packet_size < 16 || self.packet_size > 1024 || self.packet_size % 16 != 0 {
            return Err(Error::Config(format!(
                "packet_size {} outside 16..=1024 or not a multiple of 16",
                self.packet_size
            )));
        }
        Ok(())
    }
}

/// One request over an already-connected stream.
pub fn request_timing(stream: &mut TcpStream, payload: &[u8]) -> Result<(u64, Block)> {
    stream.write_all(&(payload.len() as u32).to_be_bytes())?;
    stream.write_all(payload)?;
    let mut response = [0u8; RESPONSE_BYTES];
    stream.read_exact(&mut response).map_err(|e| {
        Error::Protocol(format!("short response (error frame or dropped connection): {e}"))
    })?;
    let cycles = u64::from_be_bytes(response[..8].try_into().unwrap());
    let zeros: Block = response[8..].try_into().unwrap();
    Ok((cycles, zeros))
}

/// Streams `n_samples` seeded-random payloads to the oracle, one at a time.
/// On a connection failure the samples gathered so far come back alongside
/// the error so the caller can still flush them.
pub fn collect(addr: &str, spec: &CaptureSpec) -> (Vec<TimingSample>, Option<Error>) {
    let mut samples = Vec::with_capacity(spec.n_samples as usize);
    if let Err(e) = spec.validate() {
        return (samples, Some(e));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut payload = vec![0u8; spec.packet_size as usize];
    let mut stream = match TcpStream::connect(addr) {
        Ok(s) => s,
        Err(e) => return (samples, Some(e.into())),
    };
    let _ = stream.set_nodelay(true);
    for _ in 0..spec.n_samples {
        rng.fill_bytes(&mut payload);
        match request_timing(&mut stream, &payload) {
            Ok((cycles, _zeros)) => samples.push(TimingSample {
                plaintext: payload[..16].try_into().unwrap(),
                cycles,
            }),
            Err(e) => return (samples, Some(e)),
        }
    }
    (samples, None)
}

/// `collect` plus a dataset file. The file is written even when collection
/// dies early, with the recorded count matching what was actually captured.
pub fn capture(addr: &str, spec: &CaptureSpec, dataset_path: &Path) -> Result<Vec<TimingSample>> {
    let (samples, failure) = collect(addr, spec);
    write_dataset(dataset_path, spec.packet_size, &samples)?;
    match failure {
        None => Ok(samples),
        Some(e) => Err(e),
    }
}

/// Fetches only the scrambled zeros, via one minimal valid request.
pub fn fetch_scrambled_zeros(addr: &str) -> Result<Block> {
    let mut stream = TcpStream::connect(addr)?;
    let _ = stream.set_nodelay(true);
    let (_, zeros) = request_timing(&mut stream, &[0u8; 16])?;
    Ok(zeros)
}

pub const DATASET_MAGIC: [u8; 4] = *b"CTL1";
pub const DATASET_VERSION: u32 = 1;

/// Binary dataset: 16-byte header (magic, version, packet_size, count as
/// little-endian u32s) then per sample 16 plaintext bytes + 8 cycle bytes LE.
pub fn write_dataset(path: &Path, packet_size: u32, samples: &[TimingSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&packet_size.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.plaintext)?;
        w.write_all(&s.cycles.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(u32, Vec<TimingSample>)> {
    let bad = |reason: &str| Error::FileFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if header[..4] != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let packet_size = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let mut samples = Vec::with_capacity(count as usize);
    let mut record = [0u8; 24];
    for _ in 0..count {
        r.read_exact(&mut record).map_err(|_| bad("truncated record"))?;
        samples.push(TimingSample {
            plaintext: record[..16].try_into().unwrap(),
            cycles: u64::from_le_bytes(record[16..].try_into().unwrap()),
        });
    }
    Ok((packet_size, samples))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cell {
    pub count: u64,
    pub sum: u64,
    pub sum_sq: u128,
}

/// Per (byte position, byte value) cycle statistics over one capture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimingProfile {
    pub packet_size: u32,
    cells: Vec<Cell>,
}

impl TimingProfile {
    pub fn new(packet_size: u32) -> Self {
        TimingProfile { packet_size, cells: vec![Cell::default(); POSITIONS * VALUES] }
    }

    pub fn cell(&self, position: usize, value: u8) -> &Cell {
        &self.cells[position * VALUES + value as usize]
    }

    fn cell_mut(&mut self, position: usize, value: u8) -> &mut Cell {
        &mut self.cells[position * VALUES + value as usize]
    }

    pub fn add_sample(&mut self, sample: &TimingSample) {
        for j in 0..POSITIONS {
            let c = self.cell_mut(j, sample.plaintext[j]);
            c.count += 1;
            c.sum += sample.cycles;
            c.sum_sq += (sample.cycles as u128) * (sample.cycles as u128);
        }
    }

    /// Every sample lands once per position, so position 0 carries the totals.
    pub fn total_samples(&self) -> u64 {
        (0..VALUES).map(|b| self.cell(0, b as u8).count).sum()
    }

    pub fn grand_mean(&self) -> f64 {
        let count: u64 = self.total_samples();
        if count == 0 {
            return 0.0;
        }
        let sum: u128 = (0..VALUES).map(|b| self.cell(0, b as u8).sum as u128).sum();
        sum as f64 / count as f64
    }

    /// Mean-vs-grand-mean signature for one position. Values never seen
    /// signature as 0.
    pub fn signature(&self, position: usize) -> [f64; VALUES] {
        let grand = self.grand_mean();
        let mut sig = [0.0f64; VALUES];
        for (b, slot) in sig.iter_mut().enumerate() {
            let c = self.cell(position, b as u8);
            if c.count > 0 {
                *slot = c.sum as f64 / c.count as f64 - grand;
            }
        }
        sig
    }
}

pub fn build_profile(samples: &[TimingSample], packet_size: u32) -> Result<TimingProfile> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("cannot profile zero samples"));
    }
    let mut profile = TimingProfile::new(packet_size);
    for s in samples {
        profile.add_sample(s);
    }
    Ok(profile)
}

/// CSV layout: `#` comment lines (packet_size and caller extras), a header
/// row, then one row per (position, value) cell.
pub fn write_profile(path: &Path, profile: &TimingProfile, comments: &[String]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# packet_size = {}", profile.packet_size)?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "pos,value,count,sum,sum_sq")?;
    for j in 0..POSITIONS {
        for b in 0..VALUES {
            let c = profile.cell(j, b as u8);
            writeln!(w, "{j},{b},{},{},{}", c.count, c.sum, c.sum_sq)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_profile(path: &Path) -> Result<TimingProfile> {
    let bad = |line: usize, reason: &str| Error::FileFormat {
        path: path.display().to_string(),
        reason: format!("line {line}: {reason}"),
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut packet_size: Option<u32> = None;
    let mut profile: Option<TimingProfile> = None;
    let mut seen_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("packet_size") {
                let v = v.trim_start_matches([' ', '=']).trim();
                packet_size = Some(v.parse().map_err(|_| bad(i + 1, "bad packet_size"))?);
            }
            continue;
        }
        if !seen_header {
            if line != "pos,value,count,sum,sum_sq" {
                return Err(bad(i + 1, "missing pos,value,count,sum,sum_sq header"));
            }
            seen_header = true;
            let ps = packet_size.ok_or_else(|| bad(i + 1, "missing packet_size comment"))?;
            profile = Some(TimingProfile::new(ps));
            continue;
        }
        let p = profile.as_mut().unwrap();
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .ok_or_else(|| bad(i + 1, &format!("missing {name}")))
                .and_then(|f| {
                    f.trim().parse::<u128>().map_err(|_| bad(i + 1, &format!("bad {name}")))
                })
        };
        let (j, b) = (next("pos")? as usize, next("value")? as usize);
        if j >= POSITIONS || b >= VALUES {
            return Err(bad(i + 1, "pos or value out of range"));
        }
        let cell = Cell {
            count: next("count")? as u64,
            sum: next("sum")? as u64,
            sum_sq: next("sum_sq")?,
        };
        *p.cell_mut(j, b as u8) = cell;
    }
    let profile = profile.ok_or_else(|| bad(0, "no data rows"))?;
    let reference = profile.total_samples();
    for j in 1..POSITIONS {
        let row: u64 = (0..VALUES).map(|b| profile.cell(j, b as u8).count).sum();
        if row != reference {
            return Err(bad(0, &format!("row {j} count {row} != {reference}")));
        }
    }
    Ok(profile)
}

/// Surviving key-byte candidates per position, best score first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateKeySpace {
    pub candidates: Vec<Vec<u8>>,
}

impl CandidateKeySpace {
    pub fn contains(&self, position: usize, byte: u8) -> bool {
        self.candidates[position].contains(&byte)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }
}

/// Scores candidate `c` for position `j` by sliding the known-key signature
/// over the unknown-key signature: `score(c) = sum_b study_sig[b ^ k0[j] ^ c]
/// * attack_sig[b]`. The peak lands on the true byte because both signatures
/// are the same table-line profile, XOR-shifted by their keys. Candidates
/// within `alpha` standard deviations of the per-position maximum survive
/// (inclusive), best score first, ties by byte value.
pub fn correlate(
    study: &TimingProfile,
    study_key: &AesKey,
    attack: &TimingProfile,
    alpha: f64,
) -> Result<CandidateKeySpace> {
    if study.packet_size != attack.packet_size {
        return Err(Error::Config(format!(
            "profiles disagree on packet size: {} vs {}",
            study.packet_size, attack.packet_size
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config("threshold alpha must be >= 0".into()));
    }
    let mut candidates = Vec::with_capacity(POSITIONS);
    for j in 0..POSITIONS {
        let sig_study = study.signature(j);
        let sig_attack = attack.signature(j);
        let mut scores = [0.0f64; VALUES];
        for (c, score) in scores.iter_mut().enumerate() {
            let shift = (study_key[j] ^ c as u8) as usize;
            *score = (0..VALUES).map(|b| sig_study[b ^ shift] * sig_attack[b]).sum();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.iter().sum::<f64>() / VALUES as f64;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / VALUES as f64;
        let threshold = max - alpha * var.sqrt();
        let mut kept: Vec<u8> =
            (0..VALUES).filter(|&c| scores[c] >= threshold).map(|c| c as u8).collect();
        kept.sort_by(|a, b| {
            scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b))
        });
        candidates.push(kept);
    }
    Ok(CandidateKeySpace { candidates })
}

/// Exact product of the per-position candidate counts.
pub fn keyspace_size(cs: &CandidateKeySpace) -> BigUint {
    cs.candidates.iter().fold(BigUint::from(1u32), |acc, c| acc * BigUint::from(c.len()))
}

pub fn verify_key(candidate: &AesKey, scrambled_zeros: &Block) -> bool {
    let rk = aes::expand_key(candidate);
    aes::encrypt_block(&rk, &[0u8; 16]) == *scrambled_zeros
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOutcome {
    pub found: Option<AesKey>,
    /// Keys checked before stopping; equals the key space size on exhaustion.
    pub keys_tested: u128,
}

const SEARCH_CHUNK: u128 = 1 << 16;

/// Walks the candidate space as an odometer, position 15 cycling fastest and
/// each position in its stored (best-first) order, checking every key against
/// the scrambled zeros. Work is parallel inside sequential chunks; the first
/// match by enumeration index wins regardless of worker count.
pub fn brute_force(cs: &CandidateKeySpace, scrambled_zeros: &Block) -> SearchOutcome {
    assert_eq!(cs.candidates.len(), POSITIONS);
    assert!(cs.candidates.iter().all(|c| !c.is_empty()), "empty candidate position");
    let sizes: Vec<u128> = cs.candidates.iter().map(|c| c.len() as u128).collect();

    let key_at = |index: u128| -> AesKey {
        let mut key = [0u8; 16];
        let mut rem = index;
        for j in (0..POSITIONS).rev() {
            let digit = (rem % sizes[j]) as usize;
            rem /= sizes[j];
            key[j] = cs.candidates[j][digit];
        }
        key
    };

    match sizes.iter().try_fold(1u128, |acc, &s| acc.checked_mul(s)) {
        Some(total) => scan_range(total, &key_at, scrambled_zeros),
        None => {
            // all positions kept 256 values; 2^128 does not fit u128, so peel
            // off position 0 and scan its 2^120-sized slices
            let sub_total: u128 = sizes[1..].iter().product();
            let mut tested = 0u128;
            for &first in &cs.candidates[0] {
                let sub = |index: u128| {
                    let mut key = key_at(index);
                    key[0] = first;
                    key
                };
                let outcome = scan_range(sub_total, &sub, scrambled_zeros);
                tested = tested.saturating_add(outcome.keys_tested);
                if outcome.found.is_some() {
                    return SearchOutcome { found: outcome.found, keys_tested: tested };
                }
            }
            SearchOutcome { found: None, keys_tested: tested }
        }
    }
}

fn scan_range(
    total: u128,
    key_at: &(dyn Fn(u128) -> AesKey + Sync),
    scrambled_zeros: &Block,
) -> SearchOutcome {
    let mut base = 0u128;
    while base < total {
        let chunk = SEARCH_CHUNK.min(total - base) as u32;
        let hit = (0..chunk)
            .into_par_iter()
            .find_first(|&off| verify_key(&key_at(base + off as u128), scrambled_zeros));
        if let Some(off) = hit {
            return SearchOutcome {
                found: Some(key_at(base + off as u128)),
                keys_tested: base + off as u128 + 1,
            };
        }
        base += chunk as u128;
    }
    SearchOutcome { found: None, keys_tested: total }
}

/// Candidate-space text file: one line per position, `<count> <position>
/// <candidates as hex bytes>`, plus leading `#` comments.
pub fn write_candidates(path: &Path, cs: &CandidateKeySpace, comments: &[String]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    for (j, cands) in cs.candidates.iter().enumerate() {
        let hex_list: Vec<String> = cands.iter().map(|b| format!("{b:02x}")).collect();
        writeln!(w, "{} {} {}", cands.len(), j, hex_list.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<CandidateKeySpace> {
    let bad = |line: usize, reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason: format!("line {line}: {reason}"),
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut candidates: Vec<Vec<u8>> = vec![Vec::new(); POSITIONS];
    let mut seen = [false; POSITIONS];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let count: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(i + 1, "missing count".into()))?;
        let position: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(i + 1, "missing position".into()))?;
        if position >= POSITIONS {
            return Err(bad(i + 1, format!("position {position} out of range")));
        }
        if seen[position] {
            return Err(bad(i + 1, format!("duplicate position {position}")));
        }
        let bytes: Vec<u8> = fields
            .map(|f| u8::from_str_radix(f, 16).map_err(|e| bad(i + 1, format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        if bytes.len() != count {
            return Err(bad(i + 1, format!("count {} != {} values", count, bytes.len())));
        }
        if bytes.is_empty() {
            return Err(bad(i + 1, "empty candidate set".into()));
        }
        candidates[position] = bytes;
        seen[position] = true;
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(bad(0, format!("no line for position {j}")));
    }
    Ok(CandidateKeySpace { candidates })
}
