//! Reference AES-128 built the long way round: GF(2^8) arithmetic, an
//! algebraically derived S-box, and byte-matrix rounds. Shares nothing with
//! the library's word-oriented table implementation, so agreement between
//! the two is meaningful.

pub fn gf_mul(mut a: u8, mut b: u8) -> u8 {
    let mut acc = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            acc ^= a;
        }
        let carry = a & 0x80 != 0;
        a <<= 1;
        if carry {
            a ^= 0x1b;
        }
        b >>= 1;
    }
    acc
}

fn gf_inv(a: u8) -> u8 {
    // a^254 = a^-1 for a != 0; also maps 0 to 0
    let mut result = 1u8;
    let mut base = a;
    let mut exp = 254u8;
    while exp != 0 {
        if exp & 1 != 0 {
            result = gf_mul(result, base);
        }
        base = gf_mul(base, base);
        exp >>= 1;
    }
    result
}

pub fn sbox(a: u8) -> u8 {
    let x = gf_inv(a);
    x ^ x.rotate_left(1) ^ x.rotate_left(2) ^ x.rotate_left(3) ^ x.rotate_left(4) ^ 0x63
}

/// state[r][c] holds input byte 4c + r (column-major load).
type State = [[u8; 4]; 4];

fn to_state(block: &[u8; 16]) -> State {
    let mut s = [[0u8; 4]; 4];
    for (i, &b) in block.iter().enumerate() {
        s[i % 4][i / 4] = b;
    }
    s
}

fn from_state(s: &State) -> [u8; 16] {
    let mut out = [0u8; 16];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = s[i % 4][i / 4];
    }
    out
}

fn sub_bytes(s: &mut State) {
    for row in s.iter_mut() {
        for b in row.iter_mut() {
            *b = sbox(*b);
        }
    }
}

fn shift_rows(s: &mut State) {
    for (r, row) in s.iter_mut().enumerate() {
        row.rotate_left(r);
    }
}

fn mix_columns(s: &mut State) {
    for c in 0..4 {
        let col = [s[0][c], s[1][c], s[2][c], s[3][c]];
        for r in 0..4 {
            s[r][c] = gf_mul(2, col[r])
                ^ gf_mul(3, col[(r + 1) % 4])
                ^ col[(r + 2) % 4]
                ^ col[(r + 3) % 4];
        }
    }
}

fn add_round_key(s: &mut State, schedule: &[[u8; 4]; 44], round: usize) {
    for c in 0..4 {
        let word = schedule[4 * round + c];
        for r in 0..4 {
            s[r][c] ^= word[r];
        }
    }
}

/// 44 four-byte words, byte-oriented expansion.
pub fn key_schedule(key: &[u8; 16]) -> [[u8; 4]; 44] {
    let mut w = [[0u8; 4]; 44];
    for i in 0..4 {
        w[i] = [key[4 * i], key[4 * i + 1], key[4 * i + 2], key[4 * i + 3]];
    }
    let mut rcon = 1u8;
    for i in 4..44 {
        let mut temp = w[i - 1];
        if i % 4 == 0 {
            temp.rotate_left(1);
            for b in temp.iter_mut() {
                *b = sbox(*b);
            }
            temp[0] ^= rcon;
            rcon = gf_mul(rcon, 2);
        }
        for (j, b) in temp.iter().enumerate() {
            w[i][j] = w[i - 4][j] ^ b;
        }
    }
    w
}

pub fn encrypt(key: &[u8; 16], plaintext: &[u8; 16]) -> [u8; 16] {
    let schedule = key_schedule(key);
    let mut s = to_state(plaintext);
    add_round_key(&mut s, &schedule, 0);
    for round in 1..10 {
        sub_bytes(&mut s);
        shift_rows(&mut s);
        mix_columns(&mut s);
        add_round_key(&mut s, &schedule, round);
    }
    sub_bytes(&mut s);
    shift_rows(&mut s);
    add_round_key(&mut s, &schedule, 10);
    from_state(&s)
}
