//! CRC32C (Castagnoli) with a monoidal combine.
//!
//! A hash value carries both the checksum of a byte string and the
//! length-dependent factor `x^(8*len) mod P`, so hashes of concatenations
//! derive from part hashes: `h(a ++ b) = h(a) (+) h(b)`. Arithmetic is in
//! GF(2)[x] mod the Castagnoli polynomial, reflected-domain representation
//! (bit 31 holds the coefficient of x^0).

/// Castagnoli polynomial 0x1EDC6F41, reflected.
const POLY: u32 = 0x82f6_3b78;

/// Representation of x^0 in the reflected domain.
const ONE: u32 = 0x8000_0000;

const fn make_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut k = 0;
        while k < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ POLY } else { crc >> 1 };
            k += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static TABLE: [u32; 256] = make_table();

/// CRC32C of a byte string (init and final xor 0xFFFFFFFF).
pub fn crc32c(bytes: &[u8]) -> u32 {
    update(0, bytes)
}

/// Continue a CRC32C over more bytes.
pub fn update(crc: u32, bytes: &[u8]) -> u32 {
    let mut c = !crc;
    for &b in bytes {
        c = TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

/// Carry-less multiply modulo P in the reflected domain.
pub fn multmodp(a: u32, b: u32) -> u32 {
    let mut m = ONE;
    let mut b = b;
    let mut p = 0u32;
    loop {
        if a & m != 0 {
            p ^= b;
            if a & (m - 1) == 0 {
                break;
            }
        }
        m >>= 1;
        b = if b & 1 != 0 { (b >> 1) ^ POLY } else { b >> 1 };
    }
    p
}

/// x^n mod P for a bit count n.
pub fn xnmodp(mut n: u64) -> u32 {
    let mut p = ONE;
    let mut base = 0x4000_0000u32; // x^1
    while n != 0 {
        if n & 1 != 0 {
            p = multmodp(p, base);
        }
        base = multmodp(base, base);
        n >>= 1;
    }
    p
}

/// Monoidal CRC32C hash of a byte string: the checksum plus the shift
/// factor `x^(8*len) mod P` needed to fold it past a suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CrcHash {
    pub crc: u32,
    pub shift: u32,
}

impl CrcHash {
    /// Hash of the empty string; identity for [`CrcHash::combine`].
    pub const EMPTY: CrcHash = CrcHash { crc: 0, shift: ONE };

    pub fn of_bytes(bytes: &[u8]) -> CrcHash {
        CrcHash {
            crc: crc32c(bytes),
            shift: xnmodp(8 * bytes.len() as u64),
        }
    }

    /// Hash of the concatenation `a ++ b` from the two part hashes.
    pub fn combine(a: CrcHash, b: CrcHash) -> CrcHash {
        CrcHash {
            crc: multmodp(a.crc, b.shift) ^ b.crc,
            shift: multmodp(a.shift, b.shift),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn known_check_value() {
        // The standard CRC32C check value.
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
        assert_eq!(crc32c(b""), 0);
    }

    #[test]
    fn combine_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let la = rng.gen_range(0..200);
            let lb = rng.gen_range(0..200);
            let a: Vec<u8> = (0..la).map(|_| rng.gen()).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen()).collect();
            let mut ab = a.clone();
            ab.extend_from_slice(&b);
            let got = CrcHash::combine(CrcHash::of_bytes(&a), CrcHash::of_bytes(&b));
            assert_eq!(got, CrcHash::of_bytes(&ab));
        }
    }

    #[test]
    fn combine_identity_and_assoc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                let l = rng.gen_range(0..64);
                let v: Vec<u8> = (0..l).map(|_| rng.gen()).collect();
                CrcHash::of_bytes(&v)
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            assert_eq!(CrcHash::combine(CrcHash::EMPTY, a), a);
            assert_eq!(CrcHash::combine(a, CrcHash::EMPTY), a);
            let left = CrcHash::combine(CrcHash::combine(a, b), c);
            let right = CrcHash::combine(a, CrcHash::combine(b, c));
            assert_eq!(left, right);
        }
    }
}
