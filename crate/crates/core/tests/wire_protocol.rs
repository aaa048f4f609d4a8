//! Server and client talking over real sockets: framing, the error frame,
//! request ordering, and partial-capture flushing.

use cachelab_core::aes;
use cachelab_core::cache::{simulate_encryption, CacheConfig};
use cachelab_core::client::{self, capture, read_dataset, CaptureSpec};
use cachelab_core::countermeasure::{apply_policy, total_padded, PaddingPolicy};
use cachelab_core::server::{self, ClockSource, Oracle, OracleConfig, ERROR_FRAME, RESPONSE_BYTES};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

const KEY: [u8; 16] = [0x42; 16];

fn sim_oracle(policy: PaddingPolicy) -> Oracle {
    Oracle::new(OracleConfig {
        secret_key: KEY,
        policy,
        clock: ClockSource::Simulated,
        cache: CacheConfig { rng_seed: 77, ..CacheConfig::default() },
    })
    .unwrap()
}

#[test]
fn valid_request_gets_cycles_and_scrambled_zeros() {
    let handle = server::spawn(sim_oracle(PaddingPolicy::None), "127.0.0.1:0").unwrap();
    let mut stream = TcpStream::connect(handle.addr()).unwrap();
    let (cycles, zeros) = client::request_timing(&mut stream, &[0u8; 32]).unwrap();
    assert!(cycles > 0);
    let rk = aes::expand_key(&KEY);
    assert_eq!(zeros, aes::encrypt_block(&rk, &[0u8; 16]));
}

#[test]
fn bad_lengths_get_the_error_frame_and_a_closed_connection() {
    let handle = server::spawn(sim_oracle(PaddingPolicy::None), "127.0.0.1:0").unwrap();
    for bad_len in [0u32, 8, 17, 1040] {
        let mut stream = TcpStream::connect(handle.addr()).unwrap();
        stream.write_all(&bad_len.to_be_bytes()).unwrap();
        stream.write_all(&vec![0u8; bad_len.min(64) as usize]).unwrap();
        let mut buf = Vec::new();
        stream.read_to_end(&mut buf).unwrap();
        assert_eq!(buf, vec![ERROR_FRAME], "length {bad_len}");
    }
    // the server is still alive for well-formed clients
    let mut stream = TcpStream::connect(handle.addr()).unwrap();
    assert!(client::request_timing(&mut stream, &[1u8; 16]).is_ok());
}

#[test]
fn sequential_responses_match_offline_simulation_in_order() {
    let policy = PaddingPolicy::RunningAverage;
    let handle = server::spawn(sim_oracle(policy), "127.0.0.1:0").unwrap();
    let config = CacheConfig { rng_seed: 77, ..CacheConfig::default() };
    let rk = aes::expand_key(&KEY);
    let mut stream = TcpStream::connect(handle.addr()).unwrap();
    for i in 0..32u8 {
        let payload: Vec<u8> = (0..48).map(|j| i.wrapping_mul(19) ^ j).collect();
        let (cycles, _) = client::request_timing(&mut stream, &payload).unwrap();
        let (_, trace) = aes::encrypt_payload(&rk, &payload).unwrap();
        let rounds = simulate_encryption(&trace, &config).unwrap();
        let expected = total_padded(&apply_policy(&rounds, policy));
        assert_eq!(cycles, expected, "request {i}");
    }
}

#[test]
fn response_is_exactly_24_bytes() {
    let handle = server::spawn(sim_oracle(PaddingPolicy::None), "127.0.0.1:0").unwrap();
    let mut stream = TcpStream::connect(handle.addr()).unwrap();
    stream.write_all(&16u32.to_be_bytes()).unwrap();
    stream.write_all(&[0u8; 16]).unwrap();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 64];
    // one full response then server waits for the next request
    let n = stream.read(&mut chunk).unwrap();
    buf.extend_from_slice(&chunk[..n]);
    while buf.len() < RESPONSE_BYTES {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "connection closed early");
        buf.extend_from_slice(&chunk[..n]);
    }
    assert_eq!(buf.len(), RESPONSE_BYTES);
    drop(stream);
}

#[test]
fn capture_flushes_partial_dataset_when_the_server_dies() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let serve_three = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        for i in 0..3u64 {
            let mut len_buf = [0u8; 4];
            stream.read_exact(&mut len_buf).unwrap();
            let mut payload = vec![0u8; u32::from_be_bytes(len_buf) as usize];
            stream.read_exact(&mut payload).unwrap();
            stream.write_all(&(1000 + i).to_be_bytes()).unwrap();
            stream.write_all(&[0xEE; 16]).unwrap();
        }
        // connection dropped mid-run
    });

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.bin");
    let spec = CaptureSpec { n_samples: 10, packet_size: 16, rng_seed: 5 };
    let result = capture(&addr.to_string(), &spec, &path);
    serve_three.join().unwrap();

    assert!(result.is_err(), "capture should report the dropped connection");
    let (packet_size, samples) = read_dataset(&path).unwrap();
    assert_eq!(packet_size, 16);
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0].cycles, 1000);
    assert_eq!(samples[2].cycles, 1002);
}

#[test]
fn capture_against_a_dead_port_still_writes_an_empty_dataset() {
    let addr = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.bin");
    let spec = CaptureSpec { n_samples: 4, packet_size: 16, rng_seed: 5 };
    assert!(capture(&addr.to_string(), &spec, &path).is_err());
    let (_, samples) = read_dataset(&path).unwrap();
    assert!(samples.is_empty());
}

#[test]
fn same_seed_produces_the_same_plaintext_sequence() {
    let handle = server::spawn(sim_oracle(PaddingPolicy::None), "127.0.0.1:0").unwrap();
    let spec = CaptureSpec { n_samples: 8, packet_size: 32, rng_seed: 123 };
    let dir = tempfile::tempdir().unwrap();
    let a = capture(&handle.addr().to_string(), &spec, &dir.path().join("a.bin")).unwrap();
    let b = capture(&handle.addr().to_string(), &spec, &dir.path().join("b.bin")).unwrap();
    assert_eq!(a, b);
}
