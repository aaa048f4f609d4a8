//! The victim: a TCP oracle that encrypts client payloads under a fixed
//! secret key and answers with how long that took, plus the encryption of the
//! all-zero block. The payload's ciphertext is never sent.
//!
//! Wire format, big-endian:
//!
//! * request: `u32` payload length (16..=1024, multiple of 16), then payload
//! * response: `u64` cycles, then 16 scrambled-zero bytes (24 bytes total)
//! * malformed length: single byte `0xFF`, connection closed
//!
//! Requests are handled strictly sequentially; one measurement at a time.

use crate::aes::{self, AccessSink, AesKey, Block, RoundKeys};
use crate::cache::{simulate_encryption, CacheConfig};
use crate::countermeasure::{apply_policy, total_padded, PaddingPolicy};
use crate::{Error, Result};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

pub const MIN_PAYLOAD_BYTES: u32 = 16;
pub const MAX_PAYLOAD_BYTES: u32 = 1024;
pub const ERROR_FRAME: u8 = 0xFF;
pub const RESPONSE_BYTES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockSource {
    /// Cycles come from the cache model; bit-reproducible.
    Simulated,
    /// Cycles are wall nanoseconds measured per round on this machine, with
    /// padding realized as a calibrated busy-wait. Not reproducible.
    Hardware,
}

impl std::str::FromStr for ClockSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(ClockSource::Simulated),
            "hw" => Ok(ClockSource::Hardware),
            other => Err(Error::Config(format!("unknown clock mode {other:?}, expected sim|hw"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub secret_key: AesKey,
    pub policy: PaddingPolicy,
    pub clock: ClockSource,
    pub cache: CacheConfig,
}

pub struct Oracle {
    config: OracleConfig,
    round_keys: RoundKeys,
    scrambled_zeros: Block,
    spin_per_ns: f64,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.cache.validate()?;
        let round_keys = aes::expand_key(&config.secret_key);
        let scrambled_zeros = aes::encrypt_block(&round_keys, &[0u8; 16]);
        let spin_per_ns = match config.clock {
            ClockSource::Simulated => 0.0,
            ClockSource::Hardware => calibrate_spin(),
        };
        Ok(Oracle { config, round_keys, scrambled_zeros, spin_per_ns })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// AES of the all-zero block under the secret key; constant per key.
    pub fn scrambled_zeros(&self) -> Block {
        self.scrambled_zeros
    }

    /// Encrypts the payload and reports total padded cycles. Rejects lengths
    /// that are not positive multiples of 16; the wire layer enforces the
    /// 16..=1024 range before calling this.
    pub fn handle_payload(&self, payload: &[u8]) -> Result<u64> {
        match self.config.clock {
            ClockSource::Simulated => {
                let (_, trace) = aes::encrypt_payload(&self.round_keys, payload)?;
                let rounds = simulate_encryption(&trace, &self.config.cache)?;
                Ok(total_padded(&apply_policy(&rounds, self.config.policy)))
            }
            ClockSource::Hardware => self.handle_payload_hw(payload),
        }
    }

    fn handle_payload_hw(&self, payload: &[u8]) -> Result<u64> {
        if payload.is_empty() || payload.len() % 16 != 0 {
            return Err(Error::PayloadLength(payload.len()));
        }
        let started = Instant::now();
        let mut rounds_ns = Vec::with_capacity(payload.len() / 16 * 10);
        for chunk in payload.chunks_exact(16) {
            let block: Block = chunk.try_into().unwrap();
            let mut timer = RoundTimer { last: Instant::now(), rounds_ns: &mut rounds_ns };
            std::hint::black_box(aes::encrypt_block_with(&self.round_keys, &block, &mut timer));
        }
        for r in apply_policy(&rounds_ns, self.config.policy) {
            self.spin_for_ns(r.pad);
        }
        Ok(started.elapsed().as_nanos() as u64)
    }

    fn spin_for_ns(&self, ns: u64) {
        let iters = (ns as f64 * self.spin_per_ns) as u64;
        for i in 0..iters {
            std::hint::black_box(i);
        }
    }
}

struct RoundTimer<'a> {
    last: Instant,
    rounds_ns: &'a mut Vec<u64>,
}

impl AccessSink for RoundTimer<'_> {
    #[inline(always)]
    fn touch(&mut self, _table_id: u8, _index: u8, _round: u8) {}

    fn round_end(&mut self, _round: u8) {
        let now = Instant::now();
        self.rounds_ns.push(now.duration_since(self.last).as_nanos() as u64);
        self.last = now;
    }
}

/// Busy-wait calibration: loop iterations per nanosecond, measured once at
/// startup. Approximate by nature; hardware numbers are never asserted.
fn calibrate_spin() -> f64 {
    const ITERS: u64 = 20_000_000;
    for i in 0..100_000u64 {
        std::hint::black_box(i);
    }
    let t = Instant::now();
    for i in 0..ITERS {
        std::hint::black_box(i);
    }
    ITERS as f64 / t.elapsed().as_nanos().max(1) as f64
}

fn valid_length(len: u32) -> bool {
    (MIN_PAYLOAD_BYTES..=MAX_PAYLOAD_BYTES).contains(&len) && len % 16 == 0
}

/// Serves one connection until the peer closes it. A malformed length gets
/// the error frame and closes; encryption errors propagate without a reply.
pub fn handle_connection(stream: &mut TcpStream, oracle: &Oracle) -> Result<()> {
    loop {
        let mut len_bytes = [0u8; 4];
        match stream.read_exact(&mut len_bytes) {
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(()),
            other => other?,
        }
        let len = u32::from_be_bytes(len_bytes);
        if !valid_length(len) {
            let _ = stream.write_all(&[ERROR_FRAME]);
            return Err(Error::Protocol(format!("rejected payload length {len}")));
        }
        let mut payload = vec![0u8; len as usize];
        stream.read_exact(&mut payload)?;
        let cycles = oracle.handle_payload(&payload)?;
        let mut response = [0u8; RESPONSE_BYTES];
        response[..8].copy_from_slice(&cycles.to_be_bytes());
        response[8..].copy_from_slice(&oracle.scrambled_zeros);
        stream.write_all(&response)?;
    }
}

/// Accept loop: one connection at a time, so measurements never overlap.
/// Per-connection failures are dropped; the loop ends when `stop` is set.
pub fn serve_until(listener: TcpListener, oracle: Oracle, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::Acquire) {
            break;
        }
        if let Ok(mut stream) = conn {
            let _ = stream.set_nodelay(true);
            let _ = handle_connection(&mut stream, &oracle);
        }
    }
}

/// A server running on a background thread, stoppable from tests and the
/// end-to-end harness.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

pub fn spawn(oracle: Oracle, bind_addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind_addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let thread = std::thread::spawn(move || serve_until(listener, oracle, stop_flag));
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        // unblock the accept call
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
