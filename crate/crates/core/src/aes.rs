//! AES-128 encryption driven by 32-bit lookup tables, instrumented so every
//! table access can be reported to a cache model.
//!
//! Layout: four 1 KiB round tables (`TE0`..`TE3`, 256 entries of 4 bytes) plus
//! the 256-byte S-box used by the last round. State words follow the standard
//! column-major convention: word `i` holds plaintext bytes `4i..4i+4`
//! big-endian. Only encryption of 16-byte blocks (and ECB over multiples of
//! 16) is provided; 10 rounds, 128-bit keys.

use crate::{Error, Result};

pub type Block = [u8; 16];
pub type AesKey = [u8; 16];

pub const ROUNDS_PER_BLOCK: usize = 10;
pub const LOOKUPS_PER_ROUND: usize = 16;
pub const LOOKUPS_PER_BLOCK: usize = ROUNDS_PER_BLOCK * LOOKUPS_PER_ROUND;

/// Table id used in traces for final-round S-box lookups; 0..=3 are TE0..TE3.
pub const SBOX_TABLE_ID: u8 = 4;

/// Plaintext byte positions in the order their first-round lookups are
/// recorded. Entry `t` of a block's first recorded round touches table
/// `FIRST_ROUND_POSITIONS[t] % 4` at index
/// `plaintext[FIRST_ROUND_POSITIONS[t]] ^ key[FIRST_ROUND_POSITIONS[t]]`.
pub const FIRST_ROUND_POSITIONS: [usize; 16] =
    [0, 5, 10, 15, 4, 9, 14, 3, 8, 13, 2, 7, 12, 1, 6, 11];

pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const fn xtime(x: u8) -> u8 {
    (x << 1) ^ (((x >> 7) & 1) * 0x1b)
}

const fn build_te0() -> [u32; 256] {
    let mut t = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let s = SBOX[i] as u32;
        let s2 = xtime(SBOX[i]) as u32;
        let s3 = s2 ^ s;
        t[i] = (s2 << 24) | (s << 16) | (s << 8) | s3;
        i += 1;
    }
    t
}

const fn rotate_table(src: [u32; 256], r: u32) -> [u32; 256] {
    let mut t = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = src[i].rotate_right(r);
        i += 1;
    }
    t
}

pub const TE0: [u32; 256] = build_te0();
pub const TE1: [u32; 256] = rotate_table(TE0, 8);
pub const TE2: [u32; 256] = rotate_table(TE0, 16);
pub const TE3: [u32; 256] = rotate_table(TE0, 24);

/// One recorded table access. `round` is 0..=9 within the access's block; the
/// nine table rounds are recorded as rounds 0..=8 and the S-box round as 9.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub table_id: u8,
    pub index: u8,
    pub round: u8,
}

/// Ordered table accesses of one or more encrypted blocks, 160 per block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LookupTrace {
    pub accesses: Vec<Access>,
}

impl LookupTrace {
    pub fn with_capacity(blocks: usize) -> Self {
        LookupTrace { accesses: Vec::with_capacity(blocks * LOOKUPS_PER_BLOCK) }
    }

    pub fn rounds(&self) -> usize {
        self.accesses.len() / LOOKUPS_PER_ROUND
    }
}

/// Receiver for table accesses as the cipher makes them. `round_end` fires
/// after the 16 lookups of each round; hardware timing hooks use it.
pub trait AccessSink {
    fn touch(&mut self, table_id: u8, index: u8, round: u8);
    fn round_end(&mut self, _round: u8) {}
}

/// Sink that discards everything; the compiler erases it from the hot path.
pub struct NoTrace;

impl AccessSink for NoTrace {
    #[inline(always)]
    fn touch(&mut self, _table_id: u8, _index: u8, _round: u8) {}
}

impl AccessSink for LookupTrace {
    #[inline]
    fn touch(&mut self, table_id: u8, index: u8, round: u8) {
        self.accesses.push(Access { table_id, index, round });
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundKeys {
    pub words: [u32; 44],
}

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

fn sub_word(x: u32) -> u32 {
    (SBOX[(x >> 24) as usize] as u32) << 24
        | (SBOX[(x >> 16) as usize & 0xff] as u32) << 16
        | (SBOX[(x >> 8) as usize & 0xff] as u32) << 8
        | SBOX[x as usize & 0xff] as u32
}

pub fn expand_key(key: &AesKey) -> RoundKeys {
    let mut w = [0u32; 44];
    for i in 0..4 {
        w[i] = u32::from_be_bytes([key[4 * i], key[4 * i + 1], key[4 * i + 2], key[4 * i + 3]]);
    }
    for i in 4..44 {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = sub_word(t.rotate_left(8)) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i] = w[i - 4] ^ t;
    }
    RoundKeys { words: w }
}

#[inline(always)]
fn table_round<S: AccessSink>(s: [u32; 4], rk: &[u32], round: u8, sink: &mut S) -> [u32; 4] {
    let mut out = [0u32; 4];
    for i in 0..4 {
        let b0 = (s[i] >> 24) as u8;
        let b1 = (s[(i + 1) & 3] >> 16) as u8;
        let b2 = (s[(i + 2) & 3] >> 8) as u8;
        let b3 = s[(i + 3) & 3] as u8;
        sink.touch(0, b0, round);
        sink.touch(1, b1, round);
        sink.touch(2, b2, round);
        sink.touch(3, b3, round);
        out[i] = TE0[b0 as usize]
            ^ TE1[b1 as usize]
            ^ TE2[b2 as usize]
            ^ TE3[b3 as usize]
            ^ rk[i];
    }
    out
}

#[inline(always)]
fn sbox_round<S: AccessSink>(s: [u32; 4], rk: &[u32], sink: &mut S) -> [u32; 4] {
    let round = (ROUNDS_PER_BLOCK - 1) as u8;
    let mut out = [0u32; 4];
    for i in 0..4 {
        let b0 = (s[i] >> 24) as u8;
        let b1 = (s[(i + 1) & 3] >> 16) as u8;
        let b2 = (s[(i + 2) & 3] >> 8) as u8;
        let b3 = s[(i + 3) & 3] as u8;
        sink.touch(SBOX_TABLE_ID, b0, round);
        sink.touch(SBOX_TABLE_ID, b1, round);
        sink.touch(SBOX_TABLE_ID, b2, round);
        sink.touch(SBOX_TABLE_ID, b3, round);
        out[i] = (SBOX[b0 as usize] as u32) << 24
            | (SBOX[b1 as usize] as u32) << 16
            | (SBOX[b2 as usize] as u32) << 8
            | SBOX[b3 as usize] as u32;
        out[i] ^= rk[i];
    }
    out
}

/// Encrypts one block, reporting every table lookup to `sink`.
pub fn encrypt_block_with<S: AccessSink>(rk: &RoundKeys, plaintext: &Block, sink: &mut S) -> Block {
    let w = &rk.words;
    let mut s = [0u32; 4];
    for i in 0..4 {
        s[i] = u32::from_be_bytes([
            plaintext[4 * i],
            plaintext[4 * i + 1],
            plaintext[4 * i + 2],
            plaintext[4 * i + 3],
        ]) ^ w[i];
    }
    for r in 1..ROUNDS_PER_BLOCK {
        let round = (r - 1) as u8;
        s = table_round(s, &w[4 * r..4 * r + 4], round, sink);
        sink.round_end(round);
    }
    s = sbox_round(s, &w[40..44], sink);
    sink.round_end((ROUNDS_PER_BLOCK - 1) as u8);

    let mut out = [0u8; 16];
    for i in 0..4 {
        out[4 * i..4 * i + 4].copy_from_slice(&s[i].to_be_bytes());
    }
    out
}

pub fn encrypt_block(rk: &RoundKeys, plaintext: &Block) -> Block {
    encrypt_block_with(rk, plaintext, &mut NoTrace)
}

pub fn encrypt_block_traced(rk: &RoundKeys, plaintext: &Block) -> (Block, LookupTrace) {
    let mut trace = LookupTrace::with_capacity(1);
    let ct = encrypt_block_with(rk, plaintext, &mut trace);
    (ct, trace)
}

/// ECB over consecutive 16-byte blocks. The trace concatenates per-block
/// traces; round numbers restart at 0 for each block.
pub fn encrypt_payload(rk: &RoundKeys, payload: &[u8]) -> Result<(Vec<u8>, LookupTrace)> {
    if payload.is_empty() || payload.len() % 16 != 0 {
        return Err(Error::PayloadLength(payload.len()));
    }
    let blocks = payload.len() / 16;
    let mut trace = LookupTrace::with_capacity(blocks);
    let mut out = Vec::with_capacity(payload.len());
    for chunk in payload.chunks_exact(16) {
        let block: Block = chunk.try_into().unwrap();
        out.extend_from_slice(&encrypt_block_with(rk, &block, &mut trace));
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIPS_KEY: AesKey = [
        0x00, 0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09, 0x0a, 0x0b, 0x0c, 0x0d, 0x0e,
        0x0f,
    ];
    const FIPS_PT: Block = [
        0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xaa, 0xbb, 0xcc, 0xdd, 0xee,
        0xff,
    ];
    const FIPS_CT: Block = [
        0x69, 0xc4, 0xe0, 0xd8, 0x6a, 0x7b, 0x04, 0x30, 0xd8, 0xcd, 0xb7, 0x80, 0x70, 0xb4, 0xc5,
        0x5a,
    ];

    #[test]
    fn zero_key_first_round_words_are_zero() {
        let rk = expand_key(&[0u8; 16]);
        assert_eq!(&rk.words[..4], &[0, 0, 0, 0]);
    }

    #[test]
    fn key_expansion_is_deterministic() {
        let k: AesKey = [7u8; 16];
        assert_eq!(expand_key(&k), expand_key(&k));
    }

    #[test]
    fn standard_vector() {
        let rk = expand_key(&FIPS_KEY);
        assert_eq!(encrypt_block(&rk, &FIPS_PT), FIPS_CT);
    }

    #[test]
    fn table_entries_match_sbox_arithmetic() {
        for i in [0usize, 1, 5, 0x53, 0x80, 0xfe, 0xff] {
            let s = SBOX[i];
            let s2 = xtime(s);
            let s3 = s2 ^ s;
            let bytes = TE0[i].to_be_bytes();
            assert_eq!(bytes, [s2, s, s, s3]);
            assert_eq!(TE1[i], TE0[i].rotate_right(8));
            assert_eq!(TE2[i], TE0[i].rotate_right(16));
            assert_eq!(TE3[i], TE0[i].rotate_right(24));
        }
    }

    #[test]
    fn trace_shape_is_160_entries_in_round_order() {
        let rk = expand_key(&FIPS_KEY);
        let (_, trace) = encrypt_block_traced(&rk, &FIPS_PT);
        assert_eq!(trace.accesses.len(), LOOKUPS_PER_BLOCK);
        for (t, a) in trace.accesses.iter().enumerate() {
            assert_eq!(a.round as usize, t / LOOKUPS_PER_ROUND);
            if a.round == 9 {
                assert_eq!(a.table_id, SBOX_TABLE_ID);
            } else {
                assert_eq!(a.table_id as usize, t % 4);
            }
        }
    }

    #[test]
    fn first_round_indices_are_plaintext_xor_key() {
        let key: AesKey = [0x3c; 16];
        let pt: Block = core::array::from_fn(|i| (17 * i + 3) as u8);
        let rk = expand_key(&key);
        let (_, trace) = encrypt_block_traced(&rk, &pt);
        assert_eq!(trace.accesses[0].index, pt[0] ^ key[0]);
        for (t, &j) in FIRST_ROUND_POSITIONS.iter().enumerate() {
            let a = trace.accesses[t];
            assert_eq!(a.index, pt[j] ^ key[j], "position {j}");
            assert_eq!(a.table_id as usize, j % 4);
        }
    }

    #[test]
    fn traced_encryption_is_deterministic_and_matches_untraced() {
        let rk = expand_key(&FIPS_KEY);
        let (c1, t1) = encrypt_block_traced(&rk, &FIPS_PT);
        let (c2, t2) = encrypt_block_traced(&rk, &FIPS_PT);
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
        assert_eq!(c1, encrypt_block(&rk, &FIPS_PT));
    }

    #[test]
    fn payload_single_block_equals_encrypt_block() {
        let rk = expand_key(&FIPS_KEY);
        let (ct, trace) = encrypt_payload(&rk, &FIPS_PT).unwrap();
        assert_eq!(ct, FIPS_CT.to_vec());
        assert_eq!(trace.accesses.len(), LOOKUPS_PER_BLOCK);
    }

    #[test]
    fn payload_800_bytes_gives_50_blocks() {
        let rk = expand_key(&FIPS_KEY);
        let payload = vec![0xa5u8; 800];
        let (ct, trace) = encrypt_payload(&rk, &payload).unwrap();
        assert_eq!(ct.len(), 800);
        assert_eq!(trace.accesses.len(), 50 * LOOKUPS_PER_BLOCK);
        // round numbering restarts per block
        assert_eq!(trace.accesses[LOOKUPS_PER_BLOCK].round, 0);
    }

    #[test]
    fn payload_length_must_be_multiple_of_16() {
        let rk = expand_key(&FIPS_KEY);
        assert!(matches!(encrypt_payload(&rk, &[0u8; 17]), Err(Error::PayloadLength(17))));
        assert!(matches!(encrypt_payload(&rk, &[]), Err(Error::PayloadLength(0))));
    }
}
